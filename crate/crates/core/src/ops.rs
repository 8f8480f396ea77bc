//! Candidate cell operations and the fixed squeeze-excitation attention
//! block, plus the small layer building blocks they share with the
//! network module.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::{ParamId, ParamKind, ParamSet, TapeBind};
use crate::tape::NodeId;
use crate::tensor::Tensor;

/// Symmetric uniform init scaled by fan-in: U(−1/√fan_in, 1/√fan_in).
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

// ── layer building blocks ────────────────────────────────────────

/// Bias-free 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub spec: ConvSpec,
    pub kernel: usize,
}

impl ConvLayer {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let ci_g = c_in / spec.groups;
        let fan_in = ci_g * kernel * kernel;
        let data = fan_in_uniform(rng, fan_in, c_out * ci_g * kernel * kernel);
        let weight = params.register(
            format!("{name}.weight"),
            Tensor::new(vec![c_out, ci_g, kernel, kernel], data)?,
            ParamKind::Learnable,
        )?;
        Ok(ConvLayer { weight, spec, kernel })
    }

    pub fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        let w = bind.node(self.weight);
        bind.tape.conv2d(x, w, self.spec)
    }
}

/// Per-channel affine normalization over batch statistics, with running
/// averages used (frozen) at evaluation.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl NormLayer {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Result<Self> {
        let gamma = params.register(
            format!("{name}.gamma"),
            Tensor::full(&[channels], 1.0),
            ParamKind::Learnable,
        )?;
        let beta = params.register(
            format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            ParamKind::Learnable,
        )?;
        let running_mean = params.register(
            format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            ParamKind::Buffer,
        )?;
        let running_var = params.register(
            format!("{name}.running_var"),
            Tensor::full(&[channels], 1.0),
            ParamKind::Buffer,
        )?;
        Ok(NormLayer { gamma, beta, running_mean, running_var, eps: 1e-5, momentum: 0.1 })
    }

    pub fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        let gamma = bind.node(self.gamma);
        let beta = bind.node(self.beta);
        if bind.opts.training {
            if bind.opts.update_stats {
                let (mean, var) = bind.tape.channel_statistics(x)?;
                let m = self.momentum;
                let new_mean: Vec<f64> = bind
                    .value(self.running_mean)
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect();
                let new_var: Vec<f64> = bind
                    .value(self.running_var)
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect();
                bind.push_stat_update(self.running_mean, new_mean);
                bind.push_stat_update(self.running_var, new_var);
            }
            bind.tape.channel_norm_batch(x, gamma, beta, self.eps)
        } else {
            let mean = bind.value(self.running_mean).data().to_vec();
            let var = bind.value(self.running_var).data().to_vec();
            bind.tape.channel_norm_frozen(x, gamma, beta, self.eps, mean, var)
        }
    }
}

/// Fully connected layer with bias.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let data = fan_in_uniform(rng, in_features, in_features * out_features);
        let weight = params.register(
            format!("{name}.weight"),
            Tensor::new(vec![in_features, out_features], data)?,
            ParamKind::Learnable,
        )?;
        let bias = params.register(
            format!("{name}.bias"),
            Tensor::zeros(&[out_features]),
            ParamKind::Learnable,
        )?;
        Ok(LinearLayer { weight, bias })
    }

    pub fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        let w = bind.node(self.weight);
        let b = bind.node(self.bias);
        bind.tape.linear(x, w, b)
    }
}

/// relu → 1×1 conv → norm; the standard channel adapter.
#[derive(Debug, Clone)]
pub struct ReluConvNorm {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

impl ReluConvNorm {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let spec = ConvSpec { stride, padding: kernel / 2, dilation: 1, groups: 1 };
        let conv = ConvLayer::new(params, rng, &format!("{name}.conv"), c_in, c_out, kernel, spec)?;
        let norm = NormLayer::new(params, &format!("{name}.norm"), c_out)?;
        Ok(ReluConvNorm { conv, norm })
    }

    pub fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        let a = bind.tape.relu(x)?;
        let c = self.conv.forward(bind, a)?;
        self.norm.forward(bind, c)
    }
}

/// relu → strided 1×1 conv → norm; halves the spatial resolution.
#[derive(Debug, Clone)]
pub struct FactorizedReduce {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

impl FactorizedReduce {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let spec = ConvSpec { stride: 2, padding: 0, dilation: 1, groups: 1 };
        let conv = ConvLayer::new(params, rng, &format!("{name}.conv"), c_in, c_out, 1, spec)?;
        let norm = NormLayer::new(params, &format!("{name}.norm"), c_out)?;
        Ok(FactorizedReduce { conv, norm })
    }

    pub fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        let a = bind.tape.relu(x)?;
        let c = self.conv.forward(bind, a)?;
        self.norm.forward(bind, c)
    }
}

// ── the candidate catalog ────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpName {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    SkipConnect,
    Zero,
}

/// Catalog order; ties in genotype derivation break toward earlier entries.
pub const CANDIDATE_CATALOG: [OpName; 8] = [
    OpName::SepConv3x3,
    OpName::SepConv5x5,
    OpName::DilConv3x3,
    OpName::DilConv5x5,
    OpName::MaxPool3x3,
    OpName::AvgPool3x3,
    OpName::SkipConnect,
    OpName::Zero,
];

pub const CANDIDATE_CATALOG_NAMES: &str =
    "sep_conv_3x3, sep_conv_5x5, dil_conv_3x3, dil_conv_5x5, max_pool_3x3, avg_pool_3x3, skip_connect, zero";

impl OpName {
    pub fn parse(name: &str) -> Result<Self> {
        use OpName::*;
        Ok(match name {
            "sep_conv_3x3" => SepConv3x3,
            "sep_conv_5x5" => SepConv5x5,
            "dil_conv_3x3" => DilConv3x3,
            "dil_conv_5x5" => DilConv5x5,
            "max_pool_3x3" => MaxPool3x3,
            "avg_pool_3x3" => AvgPool3x3,
            "skip_connect" => SkipConnect,
            "zero" => Zero,
            _ => {
                return Err(Error::Catalog {
                    name: name.to_string(),
                    catalog: CANDIDATE_CATALOG_NAMES,
                })
            }
        })
    }

    pub fn name(self) -> &'static str {
        use OpName::*;
        match self {
            SepConv3x3 => "sep_conv_3x3",
            SepConv5x5 => "sep_conv_5x5",
            DilConv3x3 => "dil_conv_3x3",
            DilConv5x5 => "dil_conv_5x5",
            MaxPool3x3 => "max_pool_3x3",
            AvgPool3x3 => "avg_pool_3x3",
            SkipConnect => "skip_connect",
            Zero => "zero",
        }
    }
}

/// One depthwise+pointwise+norm stage of a separable convolution.
#[derive(Debug, Clone)]
struct SepStage {
    depthwise: ConvLayer,
    pointwise: ConvLayer,
    norm: NormLayer,
}

impl SepStage {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let padding = dilation * (kernel - 1) / 2;
        let dw_spec = ConvSpec { stride, padding, dilation, groups: channels };
        let depthwise =
            ConvLayer::new(params, rng, &format!("{name}.dw"), channels, channels, kernel, dw_spec)?;
        let pointwise = ConvLayer::new(
            params,
            rng,
            &format!("{name}.pw"),
            channels,
            channels,
            1,
            ConvSpec::unit(1, 0),
        )?;
        let norm = NormLayer::new(params, &format!("{name}.norm"), channels)?;
        Ok(SepStage { depthwise, pointwise, norm })
    }

    fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        let a = bind.tape.relu(x)?;
        let d = self.depthwise.forward(bind, a)?;
        let p = self.pointwise.forward(bind, d)?;
        self.norm.forward(bind, p)
    }
}

#[derive(Debug, Clone)]
enum OpBody {
    /// Separable conv applied twice; only the first stage strides.
    SepConv { stages: Vec<SepStage> },
    /// Single depthwise stage with dilation 2.
    DilConv { stage: SepStage },
    Pool { max: bool },
    Identity,
    Reduce(FactorizedReduce),
    Zero,
}

/// One instantiated candidate operation on a cell edge.
#[derive(Debug, Clone)]
pub struct CandidateOp {
    pub name: OpName,
    pub channels: usize,
    pub stride: usize,
    body: OpBody,
}

/// Instantiate a catalog operation with its own parameters.
pub fn make_candidate_op(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    scope: &str,
    name: OpName,
    channels: usize,
    stride: usize,
) -> Result<CandidateOp> {
    if stride != 1 && stride != 2 {
        return Err(Error::contract(format!("candidate op stride must be 1 or 2, got {stride}")));
    }
    let body = match name {
        OpName::SepConv3x3 | OpName::SepConv5x5 => {
            let k = if name == OpName::SepConv3x3 { 3 } else { 5 };
            let stages = vec![
                SepStage::new(params, rng, &format!("{scope}.s0"), channels, k, stride, 1)?,
                SepStage::new(params, rng, &format!("{scope}.s1"), channels, k, 1, 1)?,
            ];
            OpBody::SepConv { stages }
        }
        OpName::DilConv3x3 | OpName::DilConv5x5 => {
            let k = if name == OpName::DilConv3x3 { 3 } else { 5 };
            OpBody::DilConv { stage: SepStage::new(params, rng, scope, channels, k, stride, 2)? }
        }
        OpName::MaxPool3x3 => OpBody::Pool { max: true },
        OpName::AvgPool3x3 => OpBody::Pool { max: false },
        OpName::SkipConnect => {
            if stride == 1 {
                OpBody::Identity
            } else {
                OpBody::Reduce(FactorizedReduce::new(params, rng, scope, channels, channels)?)
            }
        }
        OpName::Zero => OpBody::Zero,
    };
    Ok(CandidateOp { name, channels, stride, body })
}

impl CandidateOp {
    pub fn forward(&self, bind: &mut TapeBind, x: NodeId) -> Result<NodeId> {
        let shape = bind.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dimension(
                "candidate_op",
                format!("{} expects (B,{},H,W), got {:?}", self.name.name(), self.channels, shape),
            ));
        }
        match &self.body {
            OpBody::SepConv { stages } => {
                let mut h = x;
                for stage in stages {
                    h = stage.forward(bind, h)?;
                }
                Ok(h)
            }
            OpBody::DilConv { stage } => stage.forward(bind, x),
            OpBody::Pool { max } => {
                if *max {
                    bind.tape.maxpool2d(x, 3, self.stride, 1)
                } else {
                    bind.tape.avgpool2d(x, 3, self.stride, 1)
                }
            }
            OpBody::Identity => Ok(x),
            OpBody::Reduce(fr) => fr.forward(bind, x),
            OpBody::Zero => {
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = if self.stride == 2 { (h.div_ceil(2), w.div_ceil(2)) } else { (h, w) };
                Ok(bind.tape.constant(Tensor::zeros(&[shape[0], self.channels, oh, ow])))
            }
        }
    }

    /// All parameter tensors owned by this op.
    pub fn param_ids(&self) -> Vec<ParamId> {
        fn stage_ids(s: &SepStage, out: &mut Vec<ParamId>) {
            out.push(s.depthwise.weight);
            out.push(s.pointwise.weight);
            out.push(s.norm.gamma);
            out.push(s.norm.beta);
        }
        let mut out = Vec::new();
        match &self.body {
            OpBody::SepConv { stages } => {
                for s in stages {
                    stage_ids(s, &mut out);
                }
            }
            OpBody::DilConv { stage } => stage_ids(stage, &mut out),
            OpBody::Reduce(fr) => {
                out.push(fr.conv.weight);
                out.push(fr.norm.gamma);
                out.push(fr.norm.beta);
            }
            OpBody::Pool { .. } | OpBody::Identity | OpBody::Zero => {}
        }
        out
    }

    pub fn param_count(&self, params: &ParamSet) -> usize {
        self.param_ids().iter().map(|&id| params.value(id).numel()).sum()
    }
}

// ── squeeze-excitation attention ─────────────────────────────────

/// Channel attention: squeeze (global average pool) → two-layer excitation
/// bottleneck → per-channel sigmoid gates → channel-wise scaling. Output
/// shape always equals input shape.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub channels: usize,
    pub reduction: usize,
    pub hidden: usize,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl AttentionBlock {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::contract("attention block needs positive channels and reduction"));
        }
        // Clamp the bottleneck so small channel counts stay valid, then
        // walk down to a divisor of C so the reduction is exact.
        let mut hidden = (channels / reduction).max(1);
        while channels % hidden != 0 {
            hidden -= 1;
        }
        let fc1 = LinearLayer::new(params, rng, &format!("{name}.fc1"), channels, hidden)?;
        let fc2 = LinearLayer::new(params, rng, &format!("{name}.fc2"), hidden, channels)?;
        Ok(AttentionBlock { channels, reduction, hidden, fc1, fc2 })
    }
}

/// x (B,C,H,W) → x scaled per channel by sigmoid excitation gates.
pub fn se_forward(bind: &mut TapeBind, x: NodeId, block: &AttentionBlock) -> Result<NodeId> {
    let shape = bind.tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != block.channels {
        return Err(Error::dimension(
            "se_forward",
            format!("expected (B,{},H,W), got {:?}", block.channels, shape),
        ));
    }
    let squeeze = bind.tape.global_avgpool(x)?;
    let h = block.fc1.forward(bind, squeeze)?;
    let h = bind.tape.relu(h)?;
    let e = block.fc2.forward(bind, h)?;
    let gates = bind.tape.sigmoid(e)?;
    bind.tape.scale_channels(x, gates)
}
