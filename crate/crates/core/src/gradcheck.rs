//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Max relative error between the analytic gradient of `f` with respect to
/// `x` and central finite differences at step `eps`.
///
/// `f` receives a fresh tape and the node id of `x`, builds a computation,
/// and returns the scalar loss node. It must be deterministic; this is
/// enforced by comparing two forward passes bitwise. Per element the error
/// is |analytic − numeric| / max(1, |analytic|).
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::contract("grad_check needs eps > 0"));
    }
    let eval = |f: &mut F, t: &Tensor, requires_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let xid = tape.leaf(t.clone(), requires_grad);
        let loss = f(&mut tape, xid)?;
        let value = tape.value(loss).item().map_err(|_| {
            Error::contract(format!(
                "grad_check function must return a scalar, got shape {:?}",
                tape.value(loss).shape()
            ))
        })?;
        if !requires_grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let g = grads
            .get(xid)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        Ok((value, Some(g)))
    };

    let (loss_a, analytic) = eval(&mut f, x, true)?;
    let (loss_b, _) = eval(&mut f, x, false)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(Error::Determinism(format!(
            "two forward passes disagree: {loss_a} vs {loss_b}"
        )));
    }
    let analytic = analytic.expect("requested gradient");

    let mut perturbed = x.clone();
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let orig = perturbed.data()[i];
        perturbed.data_mut()[i] = orig + eps;
        let (plus, _) = eval(&mut f, &perturbed, false)?;
        perturbed.data_mut()[i] = orig - eps;
        let (minus, _) = eval(&mut f, &perturbed, false)?;
        perturbed.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
