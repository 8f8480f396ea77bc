//! Full network assembly: stems (single and dual), stacked cells with
//! attention blocks, auxiliary tower, classifier, checkpoints and
//! summaries. Covers both the continuous-relaxation supernet (search
//! mode) and the discretized network (eval mode).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{attention_fixed_spec, build_arch_matrix, ArchMatrix, CellKind, CellSpec};
use crate::cell::{
    attach_fixed_block, register_arch_rows, selector_nodes, EvalCell, Prep, SearchCell,
};
use crate::error::{Error, Result};
use crate::genotype::{parse_genotype, serialize_genotype, Genotype};
use crate::kernels::ConvSpec;
use crate::ops::{
    se_forward, AttentionBlock, ConvLayer, FactorizedReduce, LinearLayer, NormLayer, OpName,
    ReluConvNorm, CANDIDATE_CATALOG,
};
use crate::params::{BindOpts, ParamId, ParamKind, ParamSet, TapeBind};
use crate::rng::derive_rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    Single,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetMode {
    Search,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_cells: usize,
    pub init_channels: usize,
    pub n_classes: usize,
    pub stem: StemKind,
    /// (C, H, W) of one input image.
    pub input_shape: (usize, usize, usize),
    pub auxiliary: bool,
    pub aux_weight: f64,
    pub path_dropout_p: f64,
    pub mode: NetMode,
    pub attention: bool,
    pub reduction_ratio: usize,
    /// Kernel sizes of the two dual-stem transformations.
    pub dual_stem_kernels: (usize, usize),
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_cells: 4,
            init_channels: 8,
            n_classes: 4,
            stem: StemKind::Single,
            input_shape: (1, 16, 16),
            auxiliary: false,
            aux_weight: 0.4,
            path_dropout_p: 0.0,
            mode: NetMode::Search,
            attention: true,
            reduction_ratio: 16,
            dual_stem_kernels: (3, 5),
        }
    }
}

impl NetworkConfig {
    /// Cell indices that reduce spatial resolution: floor(n/3), floor(2n/3).
    pub fn reduction_positions(&self) -> Vec<usize> {
        let mut pos = vec![self.n_cells / 3, 2 * self.n_cells / 3];
        pos.dedup();
        pos.retain(|&p| p < self.n_cells);
        pos
    }

    pub fn aux_position(&self) -> usize {
        2 * self.n_cells / 3
    }

    fn validate(&self) -> Result<()> {
        if self.n_cells == 0 {
            return Err(Error::config("n_cells", "must be positive"));
        }
        if self.init_channels == 0 {
            return Err(Error::config("init_channels", "must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least two classes"));
        }
        if self.mode == NetMode::Search {
            if self.auxiliary {
                return Err(Error::config("auxiliary", "train-time-only feature; not allowed in search mode"));
            }
            if self.path_dropout_p != 0.0 {
                return Err(Error::config("path_dropout_p", "train-time-only feature; not allowed in search mode"));
            }
        }
        if !(0.0..1.0).contains(&self.path_dropout_p) {
            return Err(Error::config("path_dropout_p", "must lie in [0,1)"));
        }
        let n_red = self.reduction_positions().len() as u32;
        let min_side = 1usize << n_red;
        let (_, h, w) = self.input_shape;
        if h < min_side || w < min_side {
            return Err(Error::config(
                "input_shape",
                format!("{h}x{w} too small for {n_red} reduction cells (spatial size would hit 0)"),
            ));
        }
        for k in [self.dual_stem_kernels.0, self.dual_stem_kernels.1] {
            if k % 2 == 0 || k == 0 {
                return Err(Error::config("dual_stem_kernels", "kernels must be odd"));
            }
        }
        Ok(())
    }
}

/// Learnable architecture matrices for the two cell kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchPair {
    pub normal: ArchMatrix,
    pub reduce: ArchMatrix,
}

impl ArchPair {
    pub fn fresh(attention: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let names: Vec<String> = CANDIDATE_CATALOG.iter().map(|o| o.name().to_string()).collect();
        let fixed = if attention { attention_fixed_spec() } else { Vec::new() };
        Ok(ArchPair {
            normal: build_arch_matrix(&CellSpec::new(CellKind::Normal), &names, &fixed, rng)?,
            reduce: build_arch_matrix(&CellSpec::new(CellKind::Reduction), &names, &fixed, rng)?,
        })
    }

    pub fn get(&self, index: usize) -> &ArchMatrix {
        match index {
            0 => &self.normal,
            _ => &self.reduce,
        }
    }
}

pub enum ArchSource {
    /// Search mode, matrices initialized from the seed.
    Fresh,
    /// Search mode with caller-provided matrices.
    Matrices(ArchPair),
    /// Eval mode, discretized cells.
    Genotype(Genotype),
}

struct ConvNorm {
    conv: ConvLayer,
    norm: NormLayer,
}

impl ConvNorm {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let spec = ConvSpec { stride: 1, padding: kernel / 2, dilation: 1, groups: 1 };
        Ok(ConvNorm {
            conv: ConvLayer::new(params, rng, &format!("{name}.conv"), c_in, c_out, kernel, spec)?,
            norm: NormLayer::new(params, &format!("{name}.norm"), c_out)?,
        })
    }

    fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        let c = self.conv.forward(bind, x)?;
        self.norm.forward(bind, c)
    }
}

enum Stem {
    Single(ConvNorm),
    Dual { first: ConvNorm, second: ConvNorm },
}

/// Lightweight mid-network classifier head.
struct AuxHead {
    conv: ConvLayer,
    norm: NormLayer,
    fc: LinearLayer,
}

impl AuxHead {
    fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, c_in: usize, n_classes: usize) -> Result<Self> {
        Ok(AuxHead {
            conv: ConvLayer::new(params, rng, "aux.conv", c_in, 128, 1, ConvSpec::unit(1, 0))?,
            norm: NormLayer::new(params, "aux.norm", 128)?,
            fc: LinearLayer::new(params, rng, "aux.fc", 128, n_classes)?,
        })
    }

    fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        let shape = bind.tape.value(x).shape().to_vec();
        let k = 5.min(shape[2]).min(shape[3]);
        let a = bind.tape.relu(x)?;
        let p = bind.tape.avgpool2d(a, k, 3, 0)?;
        let c = self.conv.forward(bind, p)?;
        let n = self.norm.forward(bind, c)?;
        let r = bind.tape.relu(n)?;
        let g = bind.tape.global_avgpool(r)?;
        self.fc.forward(bind, g)
    }
}

enum CellInstance {
    Search(SearchCell),
    Eval(EvalCell),
}

pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamSet,
    stem: Stem,
    cells: Vec<CellInstance>,
    cell_kinds: Vec<CellKind>,
    attention: Vec<Option<AttentionBlock>>,
    aux: Option<AuxHead>,
    classifier: LinearLayer,
    pub arch: Option<ArchPair>,
    pub genotype: Option<Genotype>,
}

/// Per-pass forward options.
pub struct ForwardOpts<'r> {
    pub track_weights: bool,
    pub track_arch: bool,
    pub training: bool,
    pub update_stats: bool,
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
    pub override_param: Option<(ParamId, NodeId)>,
    pub override_arch_row: Option<(usize, usize, NodeId)>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts {
            track_weights: false,
            track_arch: false,
            training: false,
            update_stats: false,
            dropout_rng: None,
            override_param: None,
            override_arch_row: None,
        }
    }
}

pub struct ForwardOut {
    pub logits: NodeId,
    pub aux_logits: Option<NodeId>,
    pub weight_nodes: Vec<(ParamId, NodeId)>,
    /// (matrix index: 0 normal / 1 reduce, row, row-leaf node)
    pub arch_nodes: Vec<(usize, usize, NodeId)>,
    pub stat_updates: Vec<(ParamId, Vec<f64>)>,
}

pub fn build_network(config: NetworkConfig, source: ArchSource, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = derive_rng(seed, "network-init", 0);
    let mut params = ParamSet::new();
    let (c_in, _, _) = config.input_shape;
    let c_stem = 3 * config.init_channels;

    let stem = match config.stem {
        StemKind::Single => Stem::Single(ConvNorm::new(&mut params, &mut rng, "stem", c_in, c_stem, 3)?),
        StemKind::Dual => Stem::Dual {
            first: ConvNorm::new(
                &mut params,
                &mut rng,
                "stem1",
                c_in,
                c_stem,
                config.dual_stem_kernels.0,
            )?,
            second: ConvNorm::new(
                &mut params,
                &mut rng,
                "stem2",
                c_in,
                c_stem,
                config.dual_stem_kernels.1,
            )?,
        },
    };

    let (arch, genotype) = match (&config.mode, source) {
        (NetMode::Search, ArchSource::Fresh) => {
            let mut arng = derive_rng(seed, "alpha-init", 0);
            (Some(ArchPair::fresh(config.attention, &mut arng)?), None)
        }
        (NetMode::Search, ArchSource::Matrices(pair)) => (Some(pair), None),
        (NetMode::Eval, ArchSource::Genotype(g)) => {
            g.validate()?;
            (None, Some(g))
        }
        (NetMode::Search, ArchSource::Genotype(_)) => {
            return Err(Error::config("mode", "search mode needs an architecture matrix, got a genotype"));
        }
        (NetMode::Eval, _) => {
            return Err(Error::config("mode", "eval mode needs a genotype"));
        }
    };

    let reductions = config.reduction_positions();
    let catalog: Vec<OpName> = CANDIDATE_CATALOG.to_vec();
    let mut cells = Vec::new();
    let mut cell_kinds = Vec::new();
    let mut attention = Vec::new();
    let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, config.init_channels);
    let mut reduction_prev = false;
    let mut aux_channels = 0usize;
    for i in 0..config.n_cells {
        let is_reduction = reductions.contains(&i);
        if is_reduction {
            c_cur *= 2;
        }
        let kind = if is_reduction { CellKind::Reduction } else { CellKind::Normal };
        let scope = format!("cells.{i}");
        let pre0 = if reduction_prev {
            Prep::Reduce(FactorizedReduce::new(&mut params, &mut rng, &format!("{scope}.pre0"), c_pp, c_cur)?)
        } else {
            Prep::Adapt(ReluConvNorm::new(&mut params, &mut rng, &format!("{scope}.pre0"), c_pp, c_cur, 1, 1)?)
        };
        let pre1 =
            Prep::Adapt(ReluConvNorm::new(&mut params, &mut rng, &format!("{scope}.pre1"), c_p, c_cur, 1, 1)?);
        let (cell, out_channels) = match &genotype {
            None => {
                let cell = SearchCell::new(&mut params, &mut rng, &scope, c_cur, kind, &catalog, pre0, pre1)?;
                (CellInstance::Search(cell), 4 * c_cur)
            }
            Some(g) => {
                let node_ops: Vec<Vec<(OpName, usize)>> = g
                    .cell(kind)
                    .iter()
                    .map(|slots| slots.iter().map(|e| (e.op, e.source)).collect())
                    .collect();
                let cell = EvalCell::new(
                    &mut params,
                    &mut rng,
                    &scope,
                    c_cur,
                    kind,
                    &node_ops,
                    g.concat_nodes.clone(),
                    pre0,
                    pre1,
                )?;
                let out = g.concat_nodes.len() * c_cur;
                (CellInstance::Eval(cell), out)
            }
        };
        cells.push(cell);
        cell_kinds.push(kind);
        attention.push(if config.attention {
            Some(AttentionBlock::new(
                &mut params,
                &mut rng,
                &format!("{scope}.attention"),
                out_channels,
                config.reduction_ratio,
            )?)
        } else {
            None
        });
        c_pp = c_p;
        c_p = out_channels;
        reduction_prev = is_reduction;
        if i == config.aux_position() {
            aux_channels = out_channels;
        }
    }

    let aux = if config.auxiliary {
        Some(AuxHead::new(&mut params, &mut rng, aux_channels, config.n_classes)?)
    } else {
        None
    };
    let classifier = LinearLayer::new(&mut params, &mut rng, "classifier", c_p, config.n_classes)?;

    Ok(Network {
        config,
        params,
        stem,
        cells,
        cell_kinds,
        attention,
        aux,
        classifier,
        arch,
        genotype,
    })
}

impl Network {
    /// The two transformed inputs fed to the first two cells.
    fn stem_forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<(NodeId, NodeId)> {
        match &self.stem {
            Stem::Single(s) => {
                let out = s.forward(bind, x)?;
                Ok((out, out))
            }
            Stem::Dual { first, second } => Ok((first.forward(bind, x)?, second.forward(bind, x)?)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, images: &Tensor, mut opts: ForwardOpts) -> Result<ForwardOut> {
        let (c, h, w) = self.config.input_shape;
        if images.shape().len() != 4 || images.shape()[1..] != [c, h, w] {
            return Err(Error::dimension(
                "network",
                format!("input {:?}, expected (B,{c},{h},{w})", images.shape()),
            ));
        }
        let x = tape.constant(images.clone());

        // architecture rows registered once per pass, shared by all cells
        let mut arch_nodes = Vec::new();
        let (rows_normal, rows_reduce, selectors) = if let Some(pair) = &self.arch {
            let over = opts.override_arch_row;
            let rows_n = register_arch_rows(
                tape,
                &pair.normal,
                0,
                opts.track_arch,
                over.filter(|(m, _, _)| *m == 0).map(|(_, r, n)| (r, n)),
            )?;
            let rows_r = register_arch_rows(
                tape,
                &pair.reduce,
                1,
                opts.track_arch,
                over.filter(|(m, _, _)| *m == 1).map(|(_, r, n)| (r, n)),
            )?;
            for (r, &node) in rows_n.row_leaves.iter().enumerate() {
                arch_nodes.push((0, r, node));
            }
            for (r, &node) in rows_r.row_leaves.iter().enumerate() {
                arch_nodes.push((1, r, node));
            }
            let sel = selector_nodes(tape, pair.normal.n_learn());
            (Some(rows_n), Some(rows_r), sel)
        } else {
            (None, None, Vec::new())
        };

        let mut bind = TapeBind::new(
            tape,
            &self.params,
            BindOpts {
                track_weights: opts.track_weights,
                training: opts.training,
                update_stats: opts.update_stats,
            },
        );
        if let Some((pid, node)) = opts.override_param {
            bind.override_param(pid, node);
        }

        let (mut s0, mut s1) = self.stem_forward(&mut bind, x)?;
        let mut aux_logits = None;
        for (i, cell) in self.cells.iter().enumerate() {
            let out = match cell {
                CellInstance::Search(sc) => {
                    let rows = match self.cell_kinds[i] {
                        CellKind::Normal => rows_normal.as_ref().expect("search mode"),
                        CellKind::Reduction => rows_reduce.as_ref().expect("search mode"),
                    };
                    sc.forward(&mut bind, s0, s1, rows, &selectors)?
                }
                CellInstance::Eval(ec) => {
                    let dropout = if opts.training && self.config.path_dropout_p > 0.0 {
                        opts.dropout_rng.as_deref_mut().map(|r| (self.config.path_dropout_p, r))
                    } else {
                        None
                    };
                    ec.forward(&mut bind, s0, s1, dropout)?
                }
            };
            let out = match (&self.attention[i], &self.arch) {
                (Some(block), Some(pair)) => {
                    let arch = pair.get(if self.cell_kinds[i] == CellKind::Normal { 0 } else { 1 });
                    attach_fixed_block(&mut bind, out, arch, block)?
                }
                (Some(block), None) => se_forward(&mut bind, out, block)?,
                (None, _) => out,
            };
            if self.aux.is_some() && opts.training && i == self.config.aux_position() {
                aux_logits = Some(self.aux.as_ref().unwrap().forward(&mut bind, out)?);
            }
            s0 = s1;
            s1 = out;
        }
        let pooled = bind.tape.global_avgpool(s1)?;
        let logits = self.classifier.forward(&mut bind, pooled)?;
        let weight_nodes = bind.bound_nodes();
        let stat_updates = bind.take_stat_updates();
        Ok(ForwardOut { logits, aux_logits, weight_nodes, arch_nodes, stat_updates })
    }

    /// Cross-entropy training loss, including the weighted auxiliary term
    /// when an auxiliary head fired this pass.
    pub fn loss(&self, tape: &mut Tape, fwd: &ForwardOut, labels: &[usize]) -> Result<NodeId> {
        let main = tape.cross_entropy_logits(fwd.logits, labels)?;
        match fwd.aux_logits {
            Some(aux) => auxiliary_loss(tape, main, aux, labels, self.config.aux_weight),
            None => Ok(main),
        }
    }

    pub fn apply_stat_updates(&mut self, updates: &[(ParamId, Vec<f64>)]) {
        for (id, data) in updates {
            self.params.value_mut(*id).data_mut().copy_from_slice(data);
        }
    }

    pub fn attention_blocks(&self) -> &[Option<AttentionBlock>] {
        &self.attention
    }

    // ── summary ──────────────────────────────────────────────────

    pub fn summary(&self) -> NetworkSummary {
        let mut layers = Vec::new();
        let mut learnable = 0usize;
        let mut buffers = 0usize;
        for (_, entry) in self.params.iter() {
            let n = entry.value.numel();
            match entry.kind {
                ParamKind::Learnable => learnable += n,
                ParamKind::Buffer => buffers += n,
            }
            layers.push(LayerSummary {
                name: entry.name.clone(),
                shape: entry.value.shape().to_vec(),
                params: n,
                kind: match entry.kind {
                    ParamKind::Learnable => "learnable",
                    ParamKind::Buffer => "buffer",
                }
                .to_string(),
            });
        }
        NetworkSummary {
            config: self.config.clone(),
            tensors: layers,
            total_learnable: learnable,
            total_buffers: buffers,
        }
    }

    // ── checkpoints ──────────────────────────────────────────────

    /// Write `<prefix>.bin` (flat little-endian f64 values) and
    /// `<prefix>.json` (manifest: tensor name → shape and byte offset,
    /// plus the network config and genotype).
    pub fn save_checkpoint(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let bin_path = prefix.with_extension("bin");
        let json_path = prefix.with_extension("json");
        let mut bin = Vec::new();
        let mut tensors = Vec::new();
        for (_, entry) in self.params.iter() {
            let offset = bin.len();
            for v in entry.value.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorRecord {
                name: entry.name.clone(),
                shape: entry.value.shape().to_vec(),
                offset_bytes: offset,
                kind: match entry.kind {
                    ParamKind::Learnable => "learnable".to_string(),
                    ParamKind::Buffer => "buffer".to_string(),
                },
            });
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            genotype: self.genotype.as_ref().map(serialize_genotype),
            tensors,
        };
        let mut f = fs::File::create(&bin_path)?;
        f.write_all(&bin)?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        fs::write(&json_path, json)?;
        Ok(())
    }

    /// Rebuild a discretized network from a checkpoint written by
    /// `save_checkpoint` and restore every tensor bit-exactly.
    pub fn from_checkpoint(prefix: impl AsRef<Path>, seed: u64) -> Result<Network> {
        let prefix = prefix.as_ref();
        let manifest: CheckpointManifest = {
            let text = fs::read_to_string(prefix.with_extension("json"))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?
        };
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
        }
        let genotype_text = manifest
            .genotype
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint has no genotype; cannot rebuild".into()))?;
        let genotype = parse_genotype(genotype_text)?;
        let mut net = build_network(manifest.config.clone(), ArchSource::Genotype(genotype), seed)?;
        let bin = fs::read(prefix.with_extension("bin"))?;
        let by_name: BTreeMap<&str, &TensorRecord> =
            manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for id in 0..net.params.len() {
            let name = net.params.name(id).to_string();
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name:?}")))?;
            let want_shape = net.params.value(id).shape().to_vec();
            if rec.shape != want_shape {
                return Err(Error::Format(format!(
                    "tensor {name:?}: checkpoint shape {:?} vs network {:?}",
                    rec.shape, want_shape
                )));
            }
            let numel: usize = rec.shape.iter().product();
            let end = rec.offset_bytes + numel * 8;
            if end > bin.len() {
                return Err(Error::Format(format!("tensor {name:?} overruns checkpoint data")));
            }
            let dst = net.params.value_mut(id).data_mut();
            for (i, chunk) in bin[rec.offset_bytes..end].chunks_exact(8).enumerate() {
                dst[i] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        if by_name.len() != net.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, network has {}",
                by_name.len(),
                net.params.len()
            )));
        }
        Ok(net)
    }
}

/// loss = CE(main) + aux_weight · CE(aux)
pub fn auxiliary_loss(
    tape: &mut Tape,
    main_loss: NodeId,
    logits_aux: NodeId,
    labels: &[usize],
    aux_weight: f64,
) -> Result<NodeId> {
    let aux = tape.cross_entropy_logits(logits_aux, labels)?;
    let scaled = tape.scalar_mul(aux, aux_weight)?;
    tape.add(main_loss, scaled)
}

/// Fraction of rows whose argmax logit matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut correct = 0usize;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("nonempty row");
        if argmax == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

const CHECKPOINT_FORMAT: &str = "attention-darts-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset_bytes: usize,
    kind: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    config: NetworkConfig,
    genotype: Option<String>,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub shape: Vec<usize>,
    pub params: usize,
    pub kind: String,
}

#[derive(Debug, Serialize)]
pub struct NetworkSummary {
    pub config: NetworkConfig,
    pub tensors: Vec<LayerSummary>,
    pub total_learnable: usize,
    pub total_buffers: usize,
}

impl NetworkSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::GenotypeEntry;
    use rand::Rng;

    fn all_skip_genotype() -> Genotype {
        let cell: Vec<[GenotypeEntry; 2]> = (0..4)
            .map(|_| {
                [
                    GenotypeEntry { op: OpName::SkipConnect, source: 0 },
                    GenotypeEntry { op: OpName::SkipConnect, source: 1 },
                ]
            })
            .collect();
        Genotype { normal: cell.clone(), reduce: cell, concat_nodes: vec![0, 1, 2, 3] }
    }

    fn mixed_genotype() -> Genotype {
        let normal: Vec<[GenotypeEntry; 2]> = vec![
            [
                GenotypeEntry { op: OpName::SepConv3x3, source: 0 },
                GenotypeEntry { op: OpName::MaxPool3x3, source: 1 },
            ],
            [
                GenotypeEntry { op: OpName::SkipConnect, source: 1 },
                GenotypeEntry { op: OpName::SepConv5x5, source: 2 },
            ],
            [
                GenotypeEntry { op: OpName::DilConv3x3, source: 0 },
                GenotypeEntry { op: OpName::AvgPool3x3, source: 3 },
            ],
            [
                GenotypeEntry { op: OpName::DilConv5x5, source: 4 },
                GenotypeEntry { op: OpName::SkipConnect, source: 2 },
            ],
        ];
        let reduce = normal.clone();
        Genotype { normal, reduce, concat_nodes: vec![0, 1, 2, 3] }
    }

    fn rand_images(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = derive_rng(seed, "test-images", 0);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn reduction_positions_follow_floor_rule() {
        let cfg = NetworkConfig { n_cells: 8, ..Default::default() };
        assert_eq!(cfg.reduction_positions(), vec![2, 5]);
        let cfg4 = NetworkConfig { n_cells: 4, ..Default::default() };
        assert_eq!(cfg4.reduction_positions(), vec![1, 2]);
    }

    #[test]
    fn search_mode_rejects_train_only_features() {
        let cfg = NetworkConfig { auxiliary: true, ..Default::default() };
        assert!(matches!(build_network(cfg, ArchSource::Fresh, 0), Err(Error::Config { .. })));
        let cfg = NetworkConfig { path_dropout_p: 0.2, ..Default::default() };
        assert!(matches!(build_network(cfg, ArchSource::Fresh, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn too_small_input_is_config_error() {
        let cfg = NetworkConfig { input_shape: (1, 3, 3), ..Default::default() };
        let err = match build_network(cfg, ArchSource::Fresh, 0) {
            Err(e) => e,
            Ok(_) => panic!("expected config error"),
        };
        assert!(err.to_string().contains("too small"), "{err}");
    }

    #[test]
    fn search_forward_shapes_and_stat_updates() {
        let cfg = NetworkConfig { n_cells: 2, init_channels: 2, input_shape: (1, 8, 8), ..Default::default() };
        let net = build_network(cfg, ArchSource::Fresh, 7).unwrap();
        let images = rand_images(&[3, 1, 8, 8], 1);
        let mut tape = Tape::new();
        let fwd = net
            .forward(&mut tape, &images, ForwardOpts {
                track_weights: true,
                track_arch: true,
                training: true,
                update_stats: true,
                ..Default::default()
            })
            .unwrap();
        assert_eq!(tape.value(fwd.logits).shape(), &[3, 4]);
        assert!(!fwd.stat_updates.is_empty());
        assert_eq!(fwd.arch_nodes.len(), 28);
        // loss backward reaches the arch rows
        let loss = net.loss(&mut tape, &fwd, &[0, 1, 2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let nonzero_arch = fwd
            .arch_nodes
            .iter()
            .filter(|(_, _, n)| grads.get(*n).is_some_and(|g| g.iter().any(|&v| v != 0.0)))
            .count();
        assert!(nonzero_arch > 0);
    }

    #[test]
    fn channel_doubling_rule() {
        // 8 cells, C=16, 32x32 input: reductions after cells 2 and 5,
        // final feature map 8x8 with 4*64 channels
        let cfg = NetworkConfig {
            n_cells: 8,
            init_channels: 16,
            input_shape: (1, 32, 32),
            n_classes: 10,
            mode: NetMode::Eval,
            attention: false,
            ..Default::default()
        };
        let net = build_network(cfg, ArchSource::Genotype(all_skip_genotype()), 3).unwrap();
        // classifier input channels = 4 * 16 * 2^2
        let w = net.params.value(net.classifier.weight);
        assert_eq!(w.shape(), &[256, 10]);
        let images = rand_images(&[1, 1, 32, 32], 2);
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &images, ForwardOpts::default()).unwrap();
        assert_eq!(tape.value(fwd.logits).shape(), &[1, 10]);
    }

    #[test]
    fn all_skip_eval_network_has_no_conv_op_parameters() {
        let cfg = NetworkConfig {
            n_cells: 3,
            init_channels: 4,
            input_shape: (1, 8, 8),
            mode: NetMode::Eval,
            attention: false,
            ..Default::default()
        };
        let net = build_network(cfg, ArchSource::Genotype(all_skip_genotype()), 5).unwrap();
        for (_, entry) in net.params.iter() {
            assert!(
                !entry.name.contains("sep_conv") && !entry.name.contains("dil_conv"),
                "unexpected op parameter {}",
                entry.name
            );
        }
        // output responds to preprocessing convs
        let images = rand_images(&[1, 1, 8, 8], 3);
        let mut tape = Tape::new();
        let before = {
            let fwd = net.forward(&mut tape, &images, ForwardOpts::default()).unwrap();
            tape.value(fwd.logits).data().to_vec()
        };
        let mut net = net;
        let pid = net.params.find("cells.0.pre1.conv.weight").unwrap();
        net.params.value_mut(pid).data_mut()[0] += 0.5;
        let mut tape2 = Tape::new();
        let fwd2 = net.forward(&mut tape2, &images, ForwardOpts::default()).unwrap();
        assert_ne!(before, tape2.value(fwd2.logits).data());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c0 = 4usize; // init channels
        let classes = 4usize;
        let cfg = NetworkConfig {
            n_cells: 4,
            init_channels: c0,
            input_shape: (1, 16, 16),
            n_classes: classes,
            mode: NetMode::Eval,
            attention: true,
            ..Default::default()
        };
        let g = mixed_genotype();
        let net = build_network(cfg.clone(), ArchSource::Genotype(g.clone()), 11).unwrap();

        // closed-form walk of the same structure
        let sep = |c: usize, k: usize| 2 * (c * k * k + c * c + 2 * c);
        let dil = |c: usize, k: usize| c * k * k + c * c + 2 * c;
        let op_count = |op: OpName, c: usize, stride: usize| -> usize {
            match op {
                OpName::SepConv3x3 => sep(c, 3),
                OpName::SepConv5x5 => sep(c, 5),
                OpName::DilConv3x3 => dil(c, 3),
                OpName::DilConv5x5 => dil(c, 5),
                OpName::MaxPool3x3 | OpName::AvgPool3x3 | OpName::Zero => 0,
                OpName::SkipConnect => {
                    if stride == 1 {
                        0
                    } else {
                        c * c + 2 * c
                    }
                }
            }
        };
        let se_count = |c: usize| -> usize {
            let mut hidden = (c / 16).max(1);
            while c % hidden != 0 {
                hidden -= 1;
            }
            c * hidden + hidden + hidden * c + c
        };
        let mut expected = 3 * c0 * 9 + 2 * (3 * c0); // stem conv + norm affine
        let reductions = cfg.reduction_positions();
        let (mut c_pp, mut c_p, mut c_cur) = (3 * c0, 3 * c0, c0);
        for i in 0..cfg.n_cells {
            let red = reductions.contains(&i);
            if red {
                c_cur *= 2;
            }
            expected += c_pp * c_cur + 2 * c_cur; // pre0 (1x1 or reduce: same count)
            expected += c_p * c_cur + 2 * c_cur; // pre1
            let kind = if red { CellKind::Reduction } else { CellKind::Normal };
            for (_node, slots) in g.cell(kind).iter().enumerate() {
                for e in slots {
                    let stride = if red && e.source < 2 { 2 } else { 1 };
                    expected += op_count(e.op, c_cur, stride);
                }
            }
            expected += se_count(4 * c_cur);
            c_pp = c_p;
            c_p = 4 * c_cur;
        }
        expected += c_p * classes + classes; // classifier

        let summary = net.summary();
        assert_eq!(summary.total_learnable, expected);
        // exhaustive per-tensor count agrees with the arena total
        let exhaustive: usize = summary
            .tensors
            .iter()
            .filter(|t| t.kind == "learnable")
            .map(|t| t.params)
            .sum();
        assert_eq!(exhaustive, expected);
    }

    #[test]
    fn single_stem_outputs_identical_pair() {
        let cfg = NetworkConfig { n_cells: 2, init_channels: 2, input_shape: (1, 8, 8), ..Default::default() };
        let net = build_network(cfg, ArchSource::Fresh, 1).unwrap();
        let images = rand_images(&[2, 1, 8, 8], 9);
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let mut bind = TapeBind::new(&mut tape, &net.params, BindOpts::inference());
        let (s0, s1) = net.stem_forward(&mut bind, x).unwrap();
        assert_eq!(s0, s1);
        assert_eq!(tape.value(s0).shape(), &[2, 6, 8, 8]);
    }

    #[test]
    fn dual_stem_outputs_differ_but_match_shape() {
        let cfg = NetworkConfig {
            n_cells: 2,
            init_channels: 2,
            input_shape: (1, 8, 8),
            stem: StemKind::Dual,
            ..Default::default()
        };
        let net = build_network(cfg, ArchSource::Fresh, 1).unwrap();
        let images = rand_images(&[2, 1, 8, 8], 10);
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let mut bind = TapeBind::new(&mut tape, &net.params, BindOpts::inference());
        let (s0, s1) = net.stem_forward(&mut bind, x).unwrap();
        assert_ne!(tape.value(s0).data(), tape.value(s1).data());
        assert_eq!(tape.value(s0).shape(), tape.value(s1).shape());
        assert_eq!(tape.value(s0).shape(), &[2, 6, 8, 8]);
    }

    #[test]
    fn aux_loss_identities() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.0]).unwrap());
        let labels = [0usize, 2];
        let main = tape.cross_entropy_logits(logits, &labels).unwrap();
        let main_val = tape.value(main).item().unwrap();
        // weight 0 leaves the loss unchanged
        let total0 = auxiliary_loss(&mut tape, main, logits, &labels, 0.0).unwrap();
        assert!((tape.value(total0).item().unwrap() - main_val).abs() < 1e-15);
        // identical heads at weight 0.4 scale the loss by 1.4
        let total = auxiliary_loss(&mut tape, main, logits, &labels, 0.4).unwrap();
        assert!((tape.value(total).item().unwrap() - 1.4 * main_val).abs() < 1e-12);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = NetworkConfig {
            n_cells: 3,
            init_channels: 4,
            input_shape: (1, 8, 8),
            mode: NetMode::Eval,
            path_dropout_p: 0.2,
            auxiliary: true,
            ..Default::default()
        };
        let net = build_network(cfg, ArchSource::Genotype(mixed_genotype()), 21).unwrap();
        let images = rand_images(&[4, 1, 8, 8], 4);
        let run = || {
            let mut tape = Tape::new();
            let fwd = net.forward(&mut tape, &images, ForwardOpts::default()).unwrap();
            assert!(fwd.aux_logits.is_none()); // aux only fires in training
            tape.value(fwd.logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig {
            n_cells: 2,
            init_channels: 2,
            input_shape: (1, 8, 8),
            mode: NetMode::Eval,
            ..Default::default()
        };
        let net = build_network(cfg, ArchSource::Genotype(mixed_genotype()), 31).unwrap();
        let prefix = dir.path().join("ckpt");
        net.save_checkpoint(&prefix).unwrap();
        let restored = Network::from_checkpoint(&prefix, 99).unwrap();
        assert_eq!(net.params.len(), restored.params.len());
        for id in 0..net.params.len() {
            assert_eq!(net.params.name(id), restored.params.name(id));
            assert_eq!(net.params.value(id).data(), restored.params.value(id).data());
        }
        let images = rand_images(&[2, 1, 8, 8], 5);
        let out = |n: &Network| {
            let mut tape = Tape::new();
            let fwd = n.forward(&mut tape, &images, ForwardOpts::default()).unwrap();
            tape.value(fwd.logits).data().to_vec()
        };
        assert_eq!(out(&net), out(&restored));
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let logits = Tensor::new(vec![3, 2], vec![2.0, 1.0, 0.0, 1.0, 3.0, -1.0]).unwrap();
        assert!((accuracy(&logits, &[0, 1, 0]) - 1.0).abs() < 1e-15);
        assert!((accuracy(&logits, &[1, 1, 0]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
