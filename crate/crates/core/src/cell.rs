//! Cell forward passes: continuous-relaxation (search) cells that mix all
//! candidate operations per edge, and discretized (eval) cells built from
//! a genotype.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchMatrix, CellKind, CellSpec, N_INTERMEDIATE};
use crate::error::{Error, Result};
use crate::ops::{
    make_candidate_op, se_forward, AttentionBlock, CandidateOp, FactorizedReduce, OpName,
    ReluConvNorm,
};
use crate::params::{ParamId, ParamSet, TapeBind};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Input adapter in front of a cell.
#[derive(Debug, Clone)]
pub enum Prep {
    /// Pass through (test cells with pre-matched channels).
    Identity,
    /// relu → 1×1 conv → norm channel adapter.
    Adapt(ReluConvNorm),
    /// Strided adapter used when the previous cell was a reduction.
    Reduce(FactorizedReduce),
}

impl Prep {
    pub fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        match self {
            Prep::Identity => Ok(x),
            Prep::Adapt(a) => a.forward(bind, x),
            Prep::Reduce(r) => r.forward(bind, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Prep::Identity => vec![],
            Prep::Adapt(a) => vec![a.conv.weight, a.norm.gamma, a.norm.beta],
            Prep::Reduce(r) => vec![r.conv.weight, r.norm.gamma, r.norm.beta],
        }
    }
}

/// Tape handles for one architecture matrix during a forward pass: one
/// leaf per learnable row (its N valid logits) and the row's softmax.
/// Rows are registered once per pass and shared by every cell of the same
/// kind, so gradients accumulate across cells.
pub struct ArchRowNodes {
    pub matrix_index: usize,
    pub row_leaves: Vec<NodeId>,
    pub weights: Vec<NodeId>,
}

/// Register the learnable rows of `arch` on the tape.
///
/// `override_row` substitutes an existing node for one row (gradient
/// checking hooks in here).
pub fn register_arch_rows(
    tape: &mut Tape,
    arch: &ArchMatrix,
    matrix_index: usize,
    track: bool,
    override_row: Option<(usize, NodeId)>,
) -> Result<ArchRowNodes> {
    let n = arch.n_learn();
    let mut row_leaves = Vec::with_capacity(arch.m_learn());
    let mut weights = Vec::with_capacity(arch.m_learn());
    for r in 0..arch.m_learn() {
        let leaf = match override_row {
            Some((row, node)) if row == r => node,
            _ => {
                let logits = arch.learnable_row_logits(r)?.to_vec();
                tape.leaf(Tensor::new(vec![1, n], logits)?, track)
            }
        };
        row_leaves.push(leaf);
        weights.push(tape.softmax(leaf, 1)?);
    }
    Ok(ArchRowNodes { matrix_index, row_leaves, weights })
}

/// One-hot (N,1) constant columns used to pick single softmax weights out
/// of a row via matmul.
pub fn selector_nodes(tape: &mut Tape, n: usize) -> Vec<NodeId> {
    (0..n)
        .map(|j| {
            let mut data = vec![0.0; n];
            data[j] = 1.0;
            tape.constant(Tensor::new(vec![n, 1], data).expect("one-hot"))
        })
        .collect()
}

/// Σ_j softmax(row)_j · op_j(x): every candidate operation applied to x,
/// weighted by its row weight.
pub fn mixed_edge_forward(
    bind: &mut TapeBind,
    x: NodeId,
    row_weights: NodeId,
    selectors: &[NodeId],
    ops: &[CandidateOp],
) -> Result<NodeId> {
    if ops.is_empty() {
        return Err(Error::contract("mixed edge has no candidate operations"));
    }
    let n = bind.tape.value(row_weights).shape()[1];
    if n != ops.len() || selectors.len() != n {
        return Err(Error::contract(format!(
            "mixed edge: {} ops for {} softmax columns",
            ops.len(),
            n
        )));
    }
    let mut acc: Option<NodeId> = None;
    for (j, op) in ops.iter().enumerate() {
        let out = op.forward(bind, x)?;
        let weight = bind.tape.matmul(row_weights, selectors[j])?;
        let term = bind.tape.mul(weight, out)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => bind.tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("at least one op"))
}

/// Continuous-relaxation cell: every edge carries all candidate ops.
/// Intermediate nodes sum over all incoming mixed edges; the output
/// concatenates the four intermediates channel-wise.
pub struct SearchCell {
    pub spec: CellSpec,
    pub pre0: Prep,
    pub pre1: Prep,
    pub edges: Vec<Vec<CandidateOp>>,
}

impl SearchCell {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        scope: &str,
        channels: usize,
        kind: CellKind,
        op_names: &[OpName],
        pre0: Prep,
        pre1: Prep,
    ) -> Result<Self> {
        let spec = CellSpec::new(kind);
        let mut edges = Vec::new();
        for edge in spec.edges() {
            let stride = if kind == CellKind::Reduction && edge.source < 2 { 2 } else { 1 };
            let mut ops = Vec::with_capacity(op_names.len());
            for (j, &name) in op_names.iter().enumerate() {
                ops.push(make_candidate_op(
                    params,
                    rng,
                    &format!("{scope}.edge{}.op{}_{}", edge.index, j, name.name()),
                    name,
                    channels,
                    stride,
                )?);
            }
            edges.push(ops);
        }
        Ok(SearchCell { spec, pre0, pre1, edges })
    }

    pub fn forward(
        &self,
        bind: &mut TapeBind,
        s0: NodeId,
        s1: NodeId,
        rows: &ArchRowNodes,
        selectors: &[NodeId],
    ) -> Result<NodeId> {
        let s0 = self.pre0.forward(bind, s0)?;
        let s1 = self.pre1.forward(bind, s1)?;
        let shape0 = bind.tape.value(s0).shape();
        let shape1 = bind.tape.value(s1).shape();
        if shape0 != shape1 {
            return Err(Error::dimension(
                "cell_forward",
                format!("preprocessed inputs disagree: {:?} vs {:?}", shape0, shape1),
            ));
        }
        let mut nodes = vec![s0, s1];
        for edge in self.spec.edges() {
            // edges arrive in row order grouped by destination node
            let x = nodes[edge.source];
            let out = mixed_edge_forward(bind, x, rows.weights[edge.index], selectors, &self.edges[edge.index])?;
            if edge.source == 0 {
                nodes.push(out);
            } else {
                let dest = 2 + edge.dest;
                nodes[dest] = bind.tape.add(nodes[dest], out)?;
            }
        }
        bind.tape.concat_channels(&nodes[2..])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        out.extend(self.pre0.param_ids());
        out.extend(self.pre1.param_ids());
        for ops in &self.edges {
            for op in ops {
                out.extend(op.param_ids());
            }
        }
        out
    }
}

/// Apply the fixed attention rows of `arch` to a cell output. Verifies the
/// rows encode the squeeze → excitation → scale chain (order of the
/// one-hot rows does not matter) and never writes to them.
pub fn attach_fixed_block(
    bind: &mut TapeBind,
    cell_output: NodeId,
    arch: &ArchMatrix,
    block: &AttentionBlock,
) -> Result<NodeId> {
    let mut have: Vec<&str> = arch.fixed_row_ops();
    have.sort_unstable();
    let mut want = vec!["channel_scale", "fc_excitation", "global_avgpool"];
    want.sort_unstable();
    if have != want {
        return Err(Error::contract(format!(
            "fixed rows {:?} do not encode the attention chain {:?}",
            have, want
        )));
    }
    se_forward(bind, cell_output, block)
}

/// Zero a whole edge output per sample with probability `p`, scaling
/// survivors by 1/(1−p).
pub fn path_dropout(bind: &mut TapeBind, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract(format!("path dropout p must lie in [0,1), got {p}")));
    }
    if p == 0.0 {
        return Ok(x);
    }
    let shape = bind.tape.value(x).shape().to_vec();
    let batch = shape[0];
    let per_sample: usize = shape[1..].iter().product();
    let keep_scale = 1.0 / (1.0 - p);
    let mut mask = vec![0.0; batch * per_sample];
    for b in 0..batch {
        let factor = if rng.gen::<f64>() < p { 0.0 } else { keep_scale };
        mask[b * per_sample..(b + 1) * per_sample].fill(factor);
    }
    bind.tape.dropout_mask(x, mask)
}

/// One discrete edge of an eval cell.
pub struct EvalEdge {
    pub op: CandidateOp,
    pub source: usize,
    pub dest: usize,
}

/// Discretized cell: each intermediate node has exactly two incoming
/// operations chosen by the genotype.
pub struct EvalCell {
    pub kind: CellKind,
    pub pre0: Prep,
    pub pre1: Prep,
    pub edges: Vec<EvalEdge>,
    pub concat: Vec<usize>,
}

impl EvalCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        scope: &str,
        channels: usize,
        kind: CellKind,
        node_ops: &[Vec<(OpName, usize)>],
        concat: Vec<usize>,
        pre0: Prep,
        pre1: Prep,
    ) -> Result<Self> {
        let mut edges = Vec::new();
        for (dest, slots) in node_ops.iter().enumerate() {
            for (slot, (name, source)) in slots.iter().enumerate() {
                let stride = if kind == CellKind::Reduction && *source < 2 { 2 } else { 1 };
                let op = make_candidate_op(
                    params,
                    rng,
                    &format!("{scope}.n{dest}s{slot}_{}", name.name()),
                    *name,
                    channels,
                    stride,
                )?;
                edges.push(EvalEdge { op, source: *source, dest });
            }
        }
        Ok(EvalCell { kind, pre0, pre1, edges, concat })
    }

    /// `dropout`: (probability, rng) — applied to non-identity edge
    /// outputs during training only.
    pub fn forward(
        &self,
        bind: &mut TapeBind,
        s0: NodeId,
        s1: NodeId,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<NodeId> {
        let s0 = self.pre0.forward(bind, s0)?;
        let s1 = self.pre1.forward(bind, s1)?;
        let mut nodes = vec![s0, s1];
        for dest in 0..N_INTERMEDIATE {
            let mut acc: Option<NodeId> = None;
            for edge in self.edges.iter().filter(|e| e.dest == dest) {
                let mut out = edge.op.forward(bind, nodes[edge.source])?;
                let identity_skip = edge.op.name == OpName::SkipConnect && edge.op.stride == 1;
                if let Some((p, rng)) = dropout.as_mut() {
                    if !identity_skip {
                        out = path_dropout(bind, out, *p, rng)?;
                    }
                }
                acc = Some(match acc {
                    None => out,
                    Some(prev) => bind.tape.add(prev, out)?,
                });
            }
            nodes.push(acc.ok_or_else(|| Error::contract(format!("node {dest} has no edges")))?);
        }
        let picked: Vec<NodeId> = self.concat.iter().map(|&k| nodes[2 + k]).collect();
        bind.tape.concat_channels(&picked)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        out.extend(self.pre0.param_ids());
        out.extend(self.pre1.param_ids());
        for e in &self.edges {
            out.extend(e.op.param_ids());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_arch_matrix, FixedConnection};
    use crate::params::BindOpts;
    use crate::rng::derive_rng;

    fn skip_zero_names() -> Vec<String> {
        vec!["skip_connect".to_string(), "zero".to_string()]
    }

    fn skip_zero_ops() -> Vec<OpName> {
        vec![OpName::SkipConnect, OpName::Zero]
    }

    fn flat_arch(m: &mut ArchMatrix) {
        for v in m.learnable_values_mut() {
            *v = 0.0;
        }
    }

    #[test]
    fn mixed_edge_uniform_skip_zero_halves_input() {
        let mut rng = derive_rng(7, "cell", 0);
        let mut params = ParamSet::new();
        let ops: Vec<CandidateOp> = skip_zero_ops()
            .iter()
            .enumerate()
            .map(|(j, &n)| make_candidate_op(&mut params, &mut rng, &format!("e{j}"), n, 2, 1).unwrap())
            .collect();
        let mut arch =
            build_arch_matrix(&CellSpec::new(CellKind::Normal), &skip_zero_names(), &[], &mut rng)
                .unwrap();
        flat_arch(&mut arch);
        let mut tape = Tape::new();
        let rows = register_arch_rows(&mut tape, &arch, 0, true, None).unwrap();
        let selectors = selector_nodes(&mut tape, 2);
        let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
        let t = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let x = bind.tape.constant(t.clone());
        let y = mixed_edge_forward(&mut bind, x, rows.weights[0], &selectors, &ops).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(t.data()) {
            assert!((got - 0.5 * want).abs() < 1e-15);
        }
    }

    #[test]
    fn mixed_edge_softmax_closed_forms() {
        let mut rng = derive_rng(8, "cell", 0);
        let mut params = ParamSet::new();
        let ops: Vec<CandidateOp> = skip_zero_ops()
            .iter()
            .enumerate()
            .map(|(j, &n)| make_candidate_op(&mut params, &mut rng, &format!("c{j}"), n, 1, 1).unwrap())
            .collect();
        for (logit, factor) in [((3.0f64).ln(), 0.75), (20.0, 1.0 / (1.0 + (-20.0f64).exp()))] {
            let mut tape = Tape::new();
            let row = tape.leaf(Tensor::new(vec![1, 2], vec![logit, 0.0]).unwrap(), false);
            let w = tape.softmax(row, 1).unwrap();
            let selectors = selector_nodes(&mut tape, 2);
            let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
            let x = bind.tape.constant(Tensor::full(&[1, 1, 2, 2], 2.0));
            let y = mixed_edge_forward(&mut bind, x, w, &selectors, &ops).unwrap();
            for v in tape.value(y).data() {
                assert!((v - 2.0 * factor).abs() < 1e-8, "{v} vs {}", 2.0 * factor);
            }
        }
    }

    #[test]
    fn mixed_edge_rejects_op_count_mismatch() {
        let mut rng = derive_rng(9, "cell", 0);
        let mut params = ParamSet::new();
        let op = make_candidate_op(&mut params, &mut rng, "solo", OpName::SkipConnect, 1, 1).unwrap();
        let mut tape = Tape::new();
        let row = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false);
        let w = tape.softmax(row, 1).unwrap();
        let selectors = selector_nodes(&mut tape, 2);
        let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
        let x = bind.tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let err = mixed_edge_forward(&mut bind, x, w, &selectors, std::slice::from_ref(&op)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err2 = mixed_edge_forward(&mut bind, x, w, &selectors, &[]).unwrap_err();
        assert!(matches!(err2, Error::Contract(_)));
    }

    #[test]
    fn cell_output_concats_four_nodes() {
        // C channels per node -> 4C output channels
        let mut rng = derive_rng(10, "cell", 0);
        let mut params = ParamSet::new();
        let cell = SearchCell::new(
            &mut params,
            &mut rng,
            "cell",
            4,
            CellKind::Normal,
            &skip_zero_ops(),
            Prep::Identity,
            Prep::Identity,
        )
        .unwrap();
        let mut arch =
            build_arch_matrix(&CellSpec::new(CellKind::Normal), &skip_zero_names(), &[], &mut rng)
                .unwrap();
        flat_arch(&mut arch);
        let mut tape = Tape::new();
        let rows = register_arch_rows(&mut tape, &arch, 0, false, None).unwrap();
        let selectors = selector_nodes(&mut tape, 2);
        let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
        let x = bind.tape.constant(Tensor::full(&[2, 4, 6, 6], 1.0));
        let y = cell.forward(&mut bind, x, x, &rows, &selectors).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 16, 6, 6]);
    }

    #[test]
    fn equal_logit_skip_zero_cell_matches_hand_chain() {
        // With ops {skip, zero} at equal logits every edge halves its
        // input, so node values are x, 1.5x, 2.25x, 3.375x.
        let mut rng = derive_rng(11, "cell", 0);
        let mut params = ParamSet::new();
        let cell = SearchCell::new(
            &mut params,
            &mut rng,
            "cell",
            1,
            CellKind::Normal,
            &skip_zero_ops(),
            Prep::Identity,
            Prep::Identity,
        )
        .unwrap();
        let mut arch =
            build_arch_matrix(&CellSpec::new(CellKind::Normal), &skip_zero_names(), &[], &mut rng)
                .unwrap();
        flat_arch(&mut arch);
        let mut tape = Tape::new();
        let rows = register_arch_rows(&mut tape, &arch, 0, false, None).unwrap();
        let selectors = selector_nodes(&mut tape, 2);
        let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
        let x = bind.tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = cell.forward(&mut bind, x, x, &rows, &selectors).unwrap();
        let out = tape.value(y).data();
        let want = [1.0, 1.5, 2.25, 3.375];
        for (k, w) in want.iter().enumerate() {
            for i in 0..4 {
                assert!((out[k * 4 + i] - w).abs() < 1e-12, "node {k}: {} vs {w}", out[k * 4 + i]);
            }
        }
    }

    #[test]
    fn dominant_skip_logits_degenerate_to_identity_chain() {
        // Zero logit pushed to -1e9 on every edge: softmax weight on skip
        // is 1 to machine precision, so each node is the plain sum of its
        // sources.
        let mut rng = derive_rng(12, "cell", 0);
        let mut params = ParamSet::new();
        let cell = SearchCell::new(
            &mut params,
            &mut rng,
            "cell",
            1,
            CellKind::Normal,
            &skip_zero_ops(),
            Prep::Identity,
            Prep::Identity,
        )
        .unwrap();
        let mut arch =
            build_arch_matrix(&CellSpec::new(CellKind::Normal), &skip_zero_names(), &[], &mut rng)
                .unwrap();
        for (i, v) in arch.learnable_values_mut().enumerate() {
            // column order is [skip, zero]
            *v = if i % 2 == 0 { 0.0 } else { -1e9 };
        }
        let mut tape = Tape::new();
        let rows = register_arch_rows(&mut tape, &arch, 0, false, None).unwrap();
        let selectors = selector_nodes(&mut tape, 2);
        let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
        let x = bind.tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = cell.forward(&mut bind, x, x, &rows, &selectors).unwrap();
        let out = tape.value(y).data();
        // all-skip sums: n0 = 2, n1 = 2+2 = 4, n2 = 2+2+4 = 8, n3 = 16
        let want = [2.0, 4.0, 8.0, 16.0];
        for (k, w) in want.iter().enumerate() {
            assert!((out[k * 4] - w).abs() < 1e-9, "node {k}: {} vs {w}", out[k * 4]);
        }
    }

    #[test]
    fn reduction_cell_halves_spatial_dims() {
        let mut rng = derive_rng(13, "cell", 0);
        let mut params = ParamSet::new();
        let cell = SearchCell::new(
            &mut params,
            &mut rng,
            "red",
            2,
            CellKind::Reduction,
            &skip_zero_ops(),
            Prep::Identity,
            Prep::Identity,
        )
        .unwrap();
        let mut arch =
            build_arch_matrix(&CellSpec::new(CellKind::Reduction), &skip_zero_names(), &[], &mut rng)
                .unwrap();
        flat_arch(&mut arch);
        let mut tape = Tape::new();
        let rows = register_arch_rows(&mut tape, &arch, 0, false, None).unwrap();
        let selectors = selector_nodes(&mut tape, 2);
        let mut bind = TapeBind::new(&mut tape, &params, BindOpts {
            track_weights: false,
            training: true,
            update_stats: false,
        });
        let x = bind.tape.constant(Tensor::full(&[1, 2, 8, 8], 1.0));
        let y = cell.forward(&mut bind, x, x, &rows, &selectors).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, 4, 4]);
    }

    #[test]
    fn attach_fixed_block_validates_chain_any_order() {
        let mut rng = derive_rng(14, "cell", 0);
        let mut params = ParamSet::new();
        let block = AttentionBlock::new(&mut params, &mut rng, "se", 4, 16).unwrap();
        for id in [block.fc1.weight, block.fc2.weight] {
            params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let names = skip_zero_names();
        let chains: [Vec<FixedConnection>; 2] = [
            vec![
                FixedConnection::new("global_avgpool"),
                FixedConnection::new("fc_excitation"),
                FixedConnection::new("channel_scale"),
            ],
            vec![
                FixedConnection::new("channel_scale"),
                FixedConnection::new("global_avgpool"),
                FixedConnection::new("fc_excitation"),
            ],
        ];
        let mut outputs = Vec::new();
        for chain in &chains {
            let arch =
                build_arch_matrix(&CellSpec::new(CellKind::Normal), &names, chain, &mut rng).unwrap();
            let mut tape = Tape::new();
            let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
            let x = bind.tape.constant(Tensor::full(&[1, 4, 2, 2], 2.0));
            let y = attach_fixed_block(&mut bind, x, &arch, &block).unwrap();
            outputs.push(tape.value(y).data().to_vec());
        }
        assert_eq!(outputs[0], outputs[1]);
        // zero excitation weights gate at 0.5
        assert!(outputs[0].iter().all(|v| (v - 1.0).abs() < 1e-15));

        // a matrix without the attention rows is rejected
        let mut rng2 = derive_rng(15, "cell", 0);
        let bad = build_arch_matrix(
            &CellSpec::new(CellKind::Normal),
            &names,
            &[FixedConnection::new("global_avgpool")],
            &mut rng2,
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
        let x = bind.tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(attach_fixed_block(&mut bind, x, &bad, &block).is_err());
    }

    #[test]
    fn path_dropout_identity_at_zero_p() {
        let mut rng = derive_rng(16, "cell", 0);
        let params = ParamSet::new();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
        let x = bind.tape.constant(Tensor::full(&[4, 2, 2, 2], 3.0));
        let y = path_dropout(&mut bind, x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(path_dropout(&mut bind, x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn path_dropout_rate_and_expectation() {
        let mut rng = derive_rng(17, "cell", 0);
        let params = ParamSet::new();
        let p = 0.2;
        let draws = 100_000usize;
        let mut dropped = 0usize;
        let mut sum = 0.0;
        // batches of 10 samples; count per-sample zeroing
        for _ in 0..draws / 10 {
            let mut tape = Tape::new();
            let mut bind = TapeBind::new(&mut tape, &params, BindOpts::inference());
            let x = bind.tape.constant(Tensor::full(&[10, 1, 1, 1], 1.0));
            let y = path_dropout(&mut bind, x, p, &mut rng).unwrap();
            for &v in tape.value(y).data() {
                if v == 0.0 {
                    dropped += 1;
                }
                sum += v;
            }
        }
        let rate = dropped as f64 / draws as f64;
        assert!((rate - p).abs() < 0.01, "drop rate {rate}");
        let mean = sum / draws as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
