//! Parameter update rules: SGD with momentum, Adam, cosine annealing.

use crate::error::{Error, Result};

fn check_finite(what: &str, g: &[f64]) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFault { what: format!("gradient of {what}") });
    }
    Ok(())
}

/// v ← momentum·v + (g + weight_decay·p);  p ← p − lr·v
pub fn sgd_momentum_step(
    p: &mut [f64],
    g: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if p.len() != g.len() || p.len() != velocity.len() {
        return Err(Error::contract("sgd_momentum_step: length mismatch"));
    }
    if lr < 0.0 {
        return Err(Error::contract("sgd_momentum_step: lr must be >= 0"));
    }
    check_finite("sgd parameter", g)?;
    for i in 0..p.len() {
        velocity[i] = momentum * velocity[i] + (g[i] + weight_decay * p[i]);
        p[i] -= lr * velocity[i];
    }
    Ok(())
}

/// First/second moment buffers plus the step counter for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// Bias-corrected Adam with weight decay folded into the gradient
/// (g ← g + wd·p).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    p: &mut [f64],
    g: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    eps: f64,
) -> Result<()> {
    if p.len() != g.len() || p.len() != state.m.len() {
        return Err(Error::contract("adam_step: length mismatch"));
    }
    if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
        return Err(Error::contract("adam_step: betas must lie in [0, 1)"));
    }
    check_finite("adam parameter", g)?;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..p.len() {
        let grad = g[i] + weight_decay * p[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad * grad;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Single-cycle cosine annealing:
/// lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total)).
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("cosine_lr: total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::contract(format!("cosine_lr: step {step} > total {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_momentum_step(&mut p, &[0.0], &mut v, 1.0, 0.0, 3e-4).unwrap();
        assert!((p[0] - (1.0 - 3e-4)).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_hand_iterated() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut p = [0.0];
        let mut v = [0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn nan_gradient_is_numeric_fault() {
        let mut p = [0.0];
        let mut v = [0.0];
        let err = sgd_momentum_step(&mut p, &[f64::NAN], &mut v, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::NumericFault { .. }));
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = [0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 1e-3, 0.9, 0.999, 0.0, 1e-8).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9, "{}", p[0]);
    }

    #[test]
    fn adam_zero_gradient_no_decay_keeps_params() {
        let mut p = [0.7];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut st, 1e-3, 0.5, 0.999, 0.0, 1e-8).unwrap();
        assert_eq!(p[0], 0.7);
    }

    #[test]
    fn adam_three_steps_match_reference_recurrence() {
        // f(p) = p^2, g = 2p, start p = 1, paper constants (0.5, 0.999)
        let (lr, b1, b2, eps): (f64, f64, f64, f64) = (3e-4, 0.5, 0.999, 1e-8);
        let mut p = [1.0];
        let mut st = AdamState::new(1);
        // independent 10-line reference recurrence
        let mut p_ref = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=3 {
            let g = 2.0 * p_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat: f64 = v / (1.0 - b2.powi(t));
            p_ref -= lr * m_hat / (v_hat.sqrt() + eps);

            let g_impl = 2.0 * p[0];
            adam_step(&mut p, &[g_impl], &mut st, lr, b1, b2, 0.0, eps).unwrap();
        }
        assert!((p[0] - p_ref).abs() < 1e-12, "{} vs {}", p[0], p_ref);
    }

    #[test]
    fn adam_rejects_bad_betas() {
        let mut p = [0.0];
        let mut st = AdamState::new(1);
        assert!(adam_step(&mut p, &[0.0], &mut st, 1e-3, 1.0, 0.999, 0.0, 1e-8).is_err());
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 10, 0.025, 0.0).unwrap(), 0.025);
        assert!(cosine_lr(10, 10, 0.025, 0.0).unwrap().abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.025, 0.0).unwrap() - 0.0125).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.025, 0.0).is_err());
    }
}
