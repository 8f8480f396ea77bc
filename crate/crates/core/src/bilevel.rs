//! One-step unrolled bilevel search: architecture gradients with a
//! finite-difference second-order term, masked architecture updates, and
//! the alternating search loop.

use crate::arch::ArchMatrix;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::genotype::{derive_genotype, Genotype};
use crate::kernels::l2_norm;
use crate::network::{accuracy, ForwardOpts, Network};
use crate::optim::{adam_step, cosine_lr, sgd_momentum_step, AdamState};
use crate::params::{ParamId, ParamKind, ParamSet};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

/// What a loss graph should expose for differentiation.
#[derive(Debug, Clone, Copy)]
pub struct TrackOpts {
    pub weights: bool,
    pub arch: bool,
    pub update_stats: bool,
}

/// Handles returned by a model's loss-graph builder.
pub struct GraphRefs {
    pub loss: NodeId,
    pub weight_nodes: Vec<(ParamId, NodeId)>,
    /// (matrix index, learnable row, row-leaf node)
    pub arch_nodes: Vec<(usize, usize, NodeId)>,
    pub stat_updates: Vec<(ParamId, Vec<f64>)>,
}

/// A model whose training/validation losses the bilevel optimizer can
/// differentiate with respect to weights and architecture entries.
pub trait BilevelModel {
    type Batch;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn arch_matrices(&self) -> Vec<&ArchMatrix>;
    fn arch_matrices_mut(&mut self) -> Vec<&mut ArchMatrix>;
    fn train_graph(&self, tape: &mut Tape, batch: &Self::Batch, track: TrackOpts) -> Result<GraphRefs>;
    fn val_graph(&self, tape: &mut Tape, batch: &Self::Batch, track: TrackOpts) -> Result<GraphRefs>;
}

/// Dense per-matrix gradient buffers (rows × cols, zeros outside the
/// learnable block).
pub type ArchGrads = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, Default)]
pub struct ArchGradDiagnostics {
    /// Validation gradient vanished; the second-order correction was
    /// skipped because ε would be undefined.
    pub second_order_skipped: bool,
    pub val_grad_norm: f64,
    pub epsilon: f64,
}

fn zero_arch_grads(model: &impl BilevelModel) -> ArchGrads {
    model.arch_matrices().iter().map(|m| vec![0.0; m.rows() * m.cols()]).collect()
}

fn collect_arch_grads(
    model: &impl BilevelModel,
    refs: &GraphRefs,
    grads: &crate::tape::Gradients,
) -> ArchGrads {
    let mut out = zero_arch_grads(model);
    let matrices = model.arch_matrices();
    for &(mi, row, node) in &refs.arch_nodes {
        if let Some(g) = grads.get(node) {
            let m = matrices[mi];
            let base = row * m.cols();
            // row leaves hold exactly the N learnable columns
            out[mi][base..base + m.n_learn()].copy_from_slice(g);
        }
    }
    out
}

fn collect_weight_grads(
    model: &impl BilevelModel,
    refs: &GraphRefs,
    grads: &crate::tape::Gradients,
) -> Vec<(ParamId, Vec<f64>)> {
    let params = model.params();
    refs.weight_nodes
        .iter()
        .filter(|(pid, _)| params.kind(*pid) == ParamKind::Learnable)
        .filter_map(|&(pid, node)| grads.get(node).map(|g| (pid, g.to_vec())))
        .collect()
}

/// Loss and weight gradients of the training objective at the current
/// parameters (statistics untouched).
pub fn train_weight_grads<M: BilevelModel>(
    model: &M,
    batch: &M::Batch,
) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
    let mut tape = Tape::new();
    let refs =
        model.train_graph(&mut tape, batch, TrackOpts { weights: true, arch: false, update_stats: false })?;
    let loss = tape.value(refs.loss).item()?;
    let grads = tape.backward(refs.loss)?;
    Ok((loss, collect_weight_grads(model, &refs, &grads)))
}

fn apply_weight_offset(params: &mut ParamSet, dirs: &[(ParamId, Vec<f64>)], scale: f64) {
    for (pid, g) in dirs {
        let data = params.value_mut(*pid).data_mut();
        for (p, gi) in data.iter_mut().zip(g) {
            *p += scale * gi;
        }
    }
}

/// w ← w − ξ·∇_w L_train(w, 𝛂) (plain gradient descent, the inner
/// virtual step). Returns a snapshot for restoring afterwards.
pub fn virtual_step<M: BilevelModel>(
    model: &mut M,
    batch: &M::Batch,
    xi: f64,
) -> Result<Vec<(ParamId, Vec<f64>)>> {
    let snapshot = model.params().snapshot_learnable();
    let (_, grads) = train_weight_grads(model, batch)?;
    apply_weight_offset(model.params_mut(), &grads, -xi);
    Ok(snapshot)
}

/// Architecture gradient over the learnable entries of every matrix.
///
/// First order: ∇_α L_val(w, 𝛂). Second order:
/// ∇_α L_val(w′, 𝛂) − ξ·[∇_α L_train(w⁺, 𝛂) − ∇_α L_train(w⁻, 𝛂)]/(2ε)
/// with w′ = w − ξ∇_w L_train, w± = w ± ε∇_{w′}L_val and
/// ε = 0.01/‖∇_{w′}L_val‖₂. A vanishing validation gradient skips the
/// correction and reports it in the diagnostics.
pub fn arch_gradient<M: BilevelModel>(
    model: &mut M,
    train_batch: &M::Batch,
    val_batch: &M::Batch,
    xi: f64,
    order: Order,
) -> Result<(ArchGrads, ArchGradDiagnostics)> {
    let mut diag = ArchGradDiagnostics::default();
    if order == Order::First || xi == 0.0 {
        let mut tape = Tape::new();
        let refs = model.val_graph(
            &mut tape,
            val_batch,
            TrackOpts { weights: false, arch: true, update_stats: false },
        )?;
        let grads = tape.backward(refs.loss)?;
        return Ok((collect_arch_grads(model, &refs, &grads), diag));
    }

    // inner virtual step to w'
    let snapshot = virtual_step(model, train_batch, xi)?;

    // validation loss at w': gradient for both α (term 1) and w'
    let (term1, val_weight_grads) = {
        let mut tape = Tape::new();
        let refs = model.val_graph(
            &mut tape,
            val_batch,
            TrackOpts { weights: true, arch: true, update_stats: false },
        )?;
        let grads = tape.backward(refs.loss)?;
        (collect_arch_grads(model, &refs, &grads), collect_weight_grads(model, &refs, &grads))
    };
    model.params_mut().restore(&snapshot);

    let norm = {
        let sq: f64 = val_weight_grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum();
        sq.sqrt()
    };
    diag.val_grad_norm = norm;
    if norm == 0.0 {
        diag.second_order_skipped = true;
        return Ok((term1, diag));
    }
    let epsilon = 0.01 / norm;
    diag.epsilon = epsilon;

    let arch_grads_at = |model: &mut M, scale: f64| -> Result<ArchGrads> {
        apply_weight_offset(model.params_mut(), &val_weight_grads, scale);
        let mut tape = Tape::new();
        let refs = model.train_graph(
            &mut tape,
            train_batch,
            TrackOpts { weights: false, arch: true, update_stats: false },
        )?;
        let grads = tape.backward(refs.loss)?;
        let out = collect_arch_grads(model, &refs, &grads);
        model.params_mut().restore(&snapshot);
        Ok(out)
    };
    let plus = arch_grads_at(model, epsilon)?;
    let minus = arch_grads_at(model, -epsilon)?;

    let mut out = term1;
    for (mi, buf) in out.iter_mut().enumerate() {
        for (i, v) in buf.iter_mut().enumerate() {
            *v -= xi * (plus[mi][i] - minus[mi][i]) / (2.0 * epsilon);
        }
    }
    Ok((out, diag))
}

/// Update rule for the learnable architecture block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArchUpdateRule {
    PlainDescent,
    Adam { beta1: f64, beta2: f64, weight_decay: f64, eps: f64 },
}

impl ArchUpdateRule {
    /// Adam with the architecture-optimizer constants (β₁ 0.5, β₂ 0.999,
    /// weight decay 1e-3).
    pub fn default_adam() -> Self {
        ArchUpdateRule::Adam { beta1: 0.5, beta2: 0.999, weight_decay: 1e-3, eps: 1e-8 }
    }
}

/// Step the learnable entries of `arch` by `grad` (dense rows×cols) at
/// rate `gamma`; every non-learnable entry stays bitwise unchanged. A
/// nonzero gradient outside the learnable mask is a contract violation
/// (it would mean the gradient pipeline leaked into fixed rows).
pub fn masked_arch_update(
    arch: &mut ArchMatrix,
    grad: &[f64],
    gamma: f64,
    rule: &ArchUpdateRule,
    state: &mut AdamState,
) -> Result<()> {
    if grad.len() != arch.rows() * arch.cols() {
        return Err(Error::contract(format!(
            "arch gradient has {} entries for a {}x{} matrix",
            grad.len(),
            arch.rows(),
            arch.cols()
        )));
    }
    for r in 0..arch.rows() {
        for c in 0..arch.cols() {
            if !arch.is_learnable(r, c) && grad[r * arch.cols() + c] != 0.0 {
                return Err(Error::contract(format!(
                    "nonzero gradient {} at non-learnable entry ({r},{c})",
                    grad[r * arch.cols() + c]
                )));
            }
        }
    }
    let cols = arch.cols();
    let dense: Vec<f64> =
        arch.learnable_indices().map(|(r, c)| grad[r * cols + c]).collect();
    match rule {
        ArchUpdateRule::PlainDescent => {
            if dense.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault { what: "architecture gradient".into() });
            }
            for (v, g) in arch.learnable_values_mut().zip(&dense) {
                *v -= gamma * g;
            }
        }
        ArchUpdateRule::Adam { beta1, beta2, weight_decay, eps } => {
            let mut values: Vec<f64> = Vec::with_capacity(dense.len());
            for v in arch.learnable_values_mut() {
                values.push(*v);
            }
            adam_step(&mut values, &dense, state, gamma, *beta1, *beta2, *weight_decay, *eps)
                .map_err(|_| Error::NumericFault { what: "architecture update".into() })?;
            for (v, nv) in arch.learnable_values_mut().zip(values) {
                *v = nv;
            }
        }
    }
    Ok(())
}

/// Momentum-SGD state over a parameter set.
pub struct WeightOptimizer {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl WeightOptimizer {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        let velocity = (0..params.len()).map(|i| vec![0.0; params.value(i).numel()]).collect();
        WeightOptimizer { momentum, weight_decay, velocity }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[(ParamId, Vec<f64>)],
        lr: f64,
    ) -> Result<()> {
        for (pid, g) in grads {
            let name = params.name(*pid).to_string();
            sgd_momentum_step(
                params.value_mut(*pid).data_mut(),
                g,
                &mut self.velocity[*pid],
                lr,
                self.momentum,
                self.weight_decay,
            )
            .map_err(|_| Error::NumericFault { what: format!("gradient of parameter {name}") })?;
        }
        Ok(())
    }
}

/// One real weight update: forward on the training batch (updating norm
/// statistics), backward, momentum SGD at the given rate. Returns the
/// training loss.
pub fn weight_step<M: BilevelModel>(
    model: &mut M,
    batch: &M::Batch,
    optimizer: &mut WeightOptimizer,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let refs =
        model.train_graph(&mut tape, batch, TrackOpts { weights: true, arch: false, update_stats: true })?;
    let loss = tape.value(refs.loss).item()?;
    let grads = tape.backward(refs.loss)?;
    let weight_grads = collect_weight_grads(model, &refs, &grads);
    optimizer.step(model.params_mut(), &weight_grads, lr)?;
    for (pid, data) in &refs.stat_updates {
        model.params_mut().value_mut(*pid).data_mut().copy_from_slice(data);
    }
    Ok(loss)
}

// ── the supernet as a bilevel model ──────────────────────────────

impl BilevelModel for Network {
    type Batch = Batch;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn arch_matrices(&self) -> Vec<&ArchMatrix> {
        match &self.arch {
            Some(pair) => vec![&pair.normal, &pair.reduce],
            None => Vec::new(),
        }
    }

    fn arch_matrices_mut(&mut self) -> Vec<&mut ArchMatrix> {
        match &mut self.arch {
            Some(pair) => vec![&mut pair.normal, &mut pair.reduce],
            None => Vec::new(),
        }
    }

    fn train_graph(&self, tape: &mut Tape, batch: &Batch, track: TrackOpts) -> Result<GraphRefs> {
        let fwd = self.forward(
            tape,
            &batch.images,
            ForwardOpts {
                track_weights: track.weights,
                track_arch: track.arch,
                training: true,
                update_stats: track.update_stats,
                ..Default::default()
            },
        )?;
        let loss = self.loss(tape, &fwd, &batch.labels)?;
        Ok(GraphRefs {
            loss,
            weight_nodes: fwd.weight_nodes,
            arch_nodes: fwd.arch_nodes,
            stat_updates: fwd.stat_updates,
        })
    }

    fn val_graph(&self, tape: &mut Tape, batch: &Batch, track: TrackOpts) -> Result<GraphRefs> {
        self.train_graph(tape, batch, track)
    }
}

// ── search loop ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SearchSettings {
    pub epochs: usize,
    pub order: Order,
    /// Inner (virtual) learning rate ξ.
    pub xi: f64,
    /// Architecture learning rate γ.
    pub gamma: f64,
    pub arch_rule: ArchUpdateRule,
    pub w_lr_max: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            epochs: 30,
            order: Order::Second,
            xi: 0.025,
            gamma: 3e-4,
            arch_rule: ArchUpdateRule::default_adam(),
            w_lr_max: 0.025,
            w_lr_min: 1e-3,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub pairs: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub mean_row_entropy: f64,
    pub short_epoch: bool,
    pub second_order_skips: usize,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_acc,mean_row_entropy";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.val_loss, self.val_acc, self.mean_row_entropy
        )
    }
}

/// Owns the supernet plus optimizer state and advances it epoch by epoch.
pub struct SearchLoop {
    pub net: Network,
    pub settings: SearchSettings,
    pub epoch: usize,
    w_opt: WeightOptimizer,
    arch_states: Vec<AdamState>,
}

impl SearchLoop {
    pub fn new(net: Network, settings: SearchSettings) -> Result<Self> {
        if net.arch.is_none() {
            return Err(Error::contract("search loop needs a network in search mode"));
        }
        let w_opt = WeightOptimizer::new(&net.params, settings.w_momentum, settings.w_weight_decay);
        let arch_states =
            net.arch_matrices().iter().map(|m| AdamState::new(m.learnable_len())).collect();
        Ok(SearchLoop { net, settings, epoch: 0, w_opt, arch_states })
    }

    pub fn mean_entropy(&self) -> f64 {
        let ms = self.net.arch_matrices();
        let total_rows: usize = ms.iter().map(|m| m.m_learn()).sum();
        let sum: f64 = ms.iter().map(|m| m.mean_row_entropy() * m.m_learn() as f64).sum();
        sum / total_rows as f64
    }

    /// One alternating pass over paired train/val batches: architecture
    /// update first, weight update second, per pair. Streams of unequal
    /// length truncate the epoch and set the short-epoch flag.
    pub fn search_epoch(&mut self, train: &[Batch], val: &[Batch]) -> Result<EpochMetrics> {
        let lr = cosine_lr(
            self.epoch.min(self.settings.epochs),
            self.settings.epochs.max(1),
            self.settings.w_lr_max,
            self.settings.w_lr_min,
        )?;
        let pairs = train.len().min(val.len());
        let mut metrics = EpochMetrics {
            epoch: self.epoch,
            pairs,
            short_epoch: pairs < train.len().max(val.len()),
            ..Default::default()
        };
        let mut loss_sum = 0.0;
        for (tb, vb) in train.iter().zip(val.iter()) {
            let (grads, diag) =
                arch_gradient(&mut self.net, tb, vb, self.settings.xi, self.settings.order)?;
            if diag.second_order_skipped {
                metrics.second_order_skips += 1;
            }
            let gamma = self.settings.gamma;
            let rule = self.settings.arch_rule;
            for (mi, matrix) in self.net.arch_matrices_mut().into_iter().enumerate() {
                masked_arch_update(matrix, &grads[mi], gamma, &rule, &mut self.arch_states[mi])?;
            }
            loss_sum += weight_step(&mut self.net, tb, &mut self.w_opt, lr)?;
        }
        if pairs > 0 {
            metrics.train_loss = loss_sum / pairs as f64;
            let (val_loss, val_acc) = self.evaluate(val)?;
            metrics.val_loss = val_loss;
            metrics.val_acc = val_acc;
        }
        metrics.mean_row_entropy = self.mean_entropy();
        self.epoch += 1;
        Ok(metrics)
    }

    /// Deterministic evaluation pass (frozen statistics, no updates).
    pub fn evaluate(&self, batches: &[Batch]) -> Result<(f64, f64)> {
        evaluate_network(&self.net, batches)
    }

    pub fn derive(&self) -> Result<Genotype> {
        let pair = self.net.arch.as_ref().expect("search mode");
        derive_genotype(&pair.normal, &pair.reduce)
    }
}

/// Mean loss and accuracy over batches with frozen statistics.
pub fn evaluate_network(net: &Network, batches: &[Batch]) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut n = 0usize;
    for b in batches {
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &b.images, ForwardOpts::default())?;
        let loss = tape.cross_entropy_logits(fwd.logits, &b.labels)?;
        loss_sum += tape.value(loss).item()? * b.labels.len() as f64;
        acc_sum += accuracy(tape.value(fwd.logits), &b.labels) * b.labels.len() as f64;
        n += b.labels.len();
    }
    let n = n.max(1) as f64;
    Ok((loss_sum / n, acc_sum / n))
}

// ── toy models for oracles and tests ─────────────────────────────

/// Scalar bilevel problem: L_train = (w − α)², L_val = w². The exact
/// unrolled gradient is dL_val/dα = 4ξw′ with w′ = w − 2ξ(w − α).
pub struct ToyQuadratic {
    params: ParamSet,
    arch: Vec<ArchMatrix>,
    w_id: ParamId,
}

impl ToyQuadratic {
    pub fn new(w: f64, alpha: f64) -> Result<Self> {
        let mut params = ParamSet::new();
        let w_id = params.register("w", crate::tensor::Tensor::new(vec![1, 1], vec![w])?, ParamKind::Learnable)?;
        let mut rng = crate::rng::derive_rng(0, "toy", 0);
        let mut m = ArchMatrix::with_dims(1, &["theta".to_string()], &[], &mut rng)?;
        for v in m.learnable_values_mut() {
            *v = alpha;
        }
        Ok(ToyQuadratic { params, arch: vec![m], w_id })
    }

    pub fn w(&self) -> f64 {
        self.params.value(self.w_id).data()[0]
    }

    pub fn alpha(&self) -> f64 {
        self.arch[0].get(0, 0)
    }

    pub fn exact_unrolled_gradient(&self, xi: f64) -> f64 {
        let w_prime = self.w() - 2.0 * xi * (self.w() - self.alpha());
        4.0 * xi * w_prime
    }
}

impl BilevelModel for ToyQuadratic {
    type Batch = ();

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn arch_matrices(&self) -> Vec<&ArchMatrix> {
        self.arch.iter().collect()
    }

    fn arch_matrices_mut(&mut self) -> Vec<&mut ArchMatrix> {
        self.arch.iter_mut().collect()
    }

    fn train_graph(&self, tape: &mut Tape, _batch: &(), track: TrackOpts) -> Result<GraphRefs> {
        let w = tape.leaf(self.params.value(self.w_id).clone(), track.weights);
        let alpha = tape.leaf(
            crate::tensor::Tensor::new(vec![1, 1], vec![self.alpha()])?,
            track.arch,
        );
        let neg = tape.scalar_mul(alpha, -1.0)?;
        let diff = tape.add(w, neg)?;
        let loss = tape.mul(diff, diff)?;
        Ok(GraphRefs {
            loss,
            weight_nodes: vec![(self.w_id, w)],
            arch_nodes: vec![(0, 0, alpha)],
            stat_updates: Vec::new(),
        })
    }

    fn val_graph(&self, tape: &mut Tape, _batch: &(), track: TrackOpts) -> Result<GraphRefs> {
        let w = tape.leaf(self.params.value(self.w_id).clone(), track.weights);
        let alpha = tape.leaf(
            crate::tensor::Tensor::new(vec![1, 1], vec![self.alpha()])?,
            track.arch,
        );
        let loss = tape.mul(w, w)?;
        Ok(GraphRefs {
            loss,
            weight_nodes: vec![(self.w_id, w)],
            arch_nodes: vec![(0, 0, alpha)],
            stat_updates: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::FixedConnection;
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn toy_second_order_matches_closed_form() {
        let mut toy = ToyQuadratic::new(1.0, 0.0).unwrap();
        let (grads, diag) = arch_gradient(&mut toy, &(), &(), 0.1, Order::Second).unwrap();
        assert!(!diag.second_order_skipped);
        let got = grads[0][0];
        assert!((got - 0.32).abs() < 1e-4, "{got}");
        // weights restored
        assert_eq!(toy.w(), 1.0);
    }

    #[test]
    fn toy_oracle_holds_for_twenty_random_triples() {
        let mut rng = derive_rng(40, "toy-triples", 0);
        for _ in 0..20 {
            let w: f64 = rng.gen_range(-2.0..2.0);
            let alpha: f64 = rng.gen_range(-2.0..2.0);
            let xi: f64 = rng.gen_range(0.01..0.3);
            let mut toy = ToyQuadratic::new(w, alpha).unwrap();
            let want = toy.exact_unrolled_gradient(xi);
            let (grads, _) = arch_gradient(&mut toy, &(), &(), xi, Order::Second).unwrap();
            assert!(
                (grads[0][0] - want).abs() < 1e-4,
                "w={w} alpha={alpha} xi={xi}: {} vs {want}",
                grads[0][0]
            );
        }
    }

    #[test]
    fn xi_zero_equals_first_order_exactly() {
        let mut toy = ToyQuadratic::new(0.7, -0.3).unwrap();
        let (first, _) = arch_gradient(&mut toy, &(), &(), 0.0, Order::First).unwrap();
        let (second, _) = arch_gradient(&mut toy, &(), &(), 0.0, Order::Second).unwrap();
        assert_eq!(first, second);
        // L_val has no direct α dependence, so the gradient is exactly 0
        assert_eq!(first[0][0], 0.0);
    }

    #[test]
    fn second_order_converges_to_first_order_as_xi_shrinks() {
        let diffs: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&xi| {
                let mut toy = ToyQuadratic::new(1.3, 0.4).unwrap();
                let (first, _) = arch_gradient(&mut toy, &(), &(), xi, Order::First).unwrap();
                let (second, _) = arch_gradient(&mut toy, &(), &(), xi, Order::Second).unwrap();
                (second[0][0] - first[0][0]).abs()
            })
            .collect();
        assert!(diffs[0] > diffs[1] && diffs[1] > diffs[2], "{diffs:?}");
    }

    #[test]
    fn virtual_step_quadratic_example() {
        // L_train = (w − α)² with α = 2: from w = 0 at ξ = 0.25, the
        // plain step lands on w' = 1
        let mut toy = ToyQuadratic::new(0.0, 2.0).unwrap();
        let snapshot = virtual_step(&mut toy, &(), 0.25).unwrap();
        assert!((toy.w() - 1.0).abs() < 1e-12, "{}", toy.w());
        toy.params_mut().restore(&snapshot);
        assert_eq!(toy.w(), 0.0);
    }

    #[test]
    fn weight_step_momentum_recurrence_and_zero_lr() {
        // L_train = (w − α)² with α = 0 gives gradient 2w
        let mut toy = ToyQuadratic::new(1.0, 0.0).unwrap();
        let mut opt = WeightOptimizer::new(toy.params(), 0.9, 0.0);
        weight_step(&mut toy, &(), &mut opt, 0.0).unwrap();
        assert_eq!(toy.w(), 1.0);

        // two steps vs hand recurrence
        let (lr, mu) = (0.1, 0.9);
        let mut w_ref = 1.0;
        let mut v = 0.0;
        for _ in 0..2 {
            let g = 2.0 * w_ref;
            v = mu * v + g;
            w_ref -= lr * v;
        }
        let mut toy2 = ToyQuadratic::new(1.0, 0.0).unwrap();
        let mut opt2 = WeightOptimizer::new(toy2.params(), mu, 0.0);
        weight_step(&mut toy2, &(), &mut opt2, lr).unwrap();
        weight_step(&mut toy2, &(), &mut opt2, lr).unwrap();
        assert!((toy2.w() - w_ref).abs() < 1e-12, "{} vs {w_ref}", toy2.w());
    }

    #[test]
    fn masked_update_gamma_zero_is_identity() {
        let mut rng = derive_rng(41, "mask", 0);
        let mut m = ArchMatrix::with_dims(
            2,
            &["a".to_string(), "b".to_string()],
            &[FixedConnection::new("c")],
            &mut rng,
        )
        .unwrap();
        let before = m.values().to_vec();
        // 3x3 matrix, learnable block is rows 0-1 x cols 0-1
        let grad = vec![1.0, -2.0, 0.0, 0.5, 0.25, 0.0, 0.0, 0.0, 0.0];
        let mut st = AdamState::new(m.learnable_len());
        masked_arch_update(&mut m, &grad, 0.0, &ArchUpdateRule::default_adam(), &mut st).unwrap();
        assert_eq!(m.values(), &before[..]);
    }

    #[test]
    fn masked_update_plain_descent_two_by_two() {
        // M=N=1, M'=N'=2: values [[0.5, 0], [0, 1]], grad only at (0,0)
        let mut rng = derive_rng(42, "mask", 0);
        let mut m =
            ArchMatrix::with_dims(1, &["a".to_string()], &[FixedConnection::new("b")], &mut rng)
                .unwrap();
        for v in m.learnable_values_mut() {
            *v = 0.5;
        }
        assert_eq!((m.rows(), m.cols()), (2, 2));
        let grad = vec![1.0, 0.0, 0.0, 0.0];
        let mut st = AdamState::new(1);
        masked_arch_update(&mut m, &grad, 0.1, &ArchUpdateRule::PlainDescent, &mut st).unwrap();
        assert!((m.get(0, 0) - 0.4).abs() < 1e-15);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.get(1, 1), 1.0);
    }

    #[test]
    fn masked_update_rejects_gradient_outside_mask() {
        let mut rng = derive_rng(43, "mask", 0);
        let mut m =
            ArchMatrix::with_dims(1, &["a".to_string()], &[FixedConnection::new("b")], &mut rng)
                .unwrap();
        let grad = vec![0.0, 0.0, 0.0, 0.7];
        let mut st = AdamState::new(1);
        let err =
            masked_arch_update(&mut m, &grad, 0.1, &ArchUpdateRule::PlainDescent, &mut st).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn thousand_random_updates_leave_fixed_entries_bitwise() {
        let mut rng = derive_rng(44, "mask-1000", 0);
        let names: Vec<String> =
            crate::ops::CANDIDATE_CATALOG.iter().map(|o| o.name().to_string()).collect();
        let mut m = ArchMatrix::with_dims(
            14,
            &names,
            &crate::arch::attention_fixed_spec(),
            &mut rng,
        )
        .unwrap();
        assert_eq!((m.rows(), m.cols()), (17, 11));
        let frozen: Vec<f64> = (0..17)
            .flat_map(|r| (0..11).map(move |c| (r, c)))
            .filter(|&(r, c)| !m.is_learnable(r, c))
            .map(|(r, c)| m.get(r, c))
            .collect();
        let mut st = AdamState::new(m.learnable_len());
        let rule = ArchUpdateRule::default_adam();
        for _ in 0..1000 {
            let mut grad = vec![0.0; 17 * 11];
            for r in 0..14 {
                for c in 0..8 {
                    grad[r * 11 + c] = rng.gen_range(-1.0..1.0);
                }
            }
            masked_arch_update(&mut m, &grad, 3e-4, &rule, &mut st).unwrap();
        }
        let after: Vec<f64> = (0..17)
            .flat_map(|r| (0..11).map(move |c| (r, c)))
            .filter(|&(r, c)| !m.is_learnable(r, c))
            .map(|(r, c)| m.get(r, c))
            .collect();
        assert!(frozen.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn vanishing_val_gradient_skips_correction() {
        // w = 0 makes ∇_w L_val = 2w = 0 at w' = 0 when α = 0
        let mut toy = ToyQuadratic::new(0.0, 0.0).unwrap();
        let (grads, diag) = arch_gradient(&mut toy, &(), &(), 0.1, Order::Second).unwrap();
        assert!(diag.second_order_skipped);
        assert_eq!(diag.val_grad_norm, 0.0);
        assert_eq!(grads[0][0], 0.0);
    }
}
