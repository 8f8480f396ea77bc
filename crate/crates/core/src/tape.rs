//! Reverse-mode gradient tape over a closed primitive catalog.
//!
//! Values live in an arena indexed by `NodeId`; every forward result is
//! kept (store-everything, no rematerialization). `backward` walks the
//! arena in reverse creation order, which is a valid reverse topological
//! order because inputs always precede outputs, and accumulates gradients
//! additively across fan-out. A tape freezes after one backward pass;
//! build a fresh tape (or `reset`) per step.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{dims4, Dims4, Tensor};

pub type NodeId = usize;

/// The closed catalog of differentiable primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveId {
    Add,
    Mul,
    Matmul,
    Conv2d,
    Relu,
    Sigmoid,
    SoftmaxOverAxis,
    AvgPool2d,
    MaxPool2d,
    GlobalAvgPool,
    AffineChannelNorm,
    ConcatChannels,
    ScaleChannels,
    Flatten,
    Linear,
    CrossEntropyWithLogits,
    ScalarMul,
    DropoutMaskApply,
}

pub const CATALOG: &str = "add, mul, matmul, conv2d, relu, sigmoid, softmax_over_axis, \
avgpool2d, maxpool2d, global_avgpool, affine_channel_norm, concat_channels, scale_channels, \
flatten, linear, cross_entropy_with_logits, scalar_mul, dropout_mask_apply";

impl PrimitiveId {
    pub fn parse(name: &str) -> Result<Self> {
        use PrimitiveId::*;
        Ok(match name {
            "add" => Add,
            "mul" => Mul,
            "matmul" => Matmul,
            "conv2d" => Conv2d,
            "relu" => Relu,
            "sigmoid" => Sigmoid,
            "softmax_over_axis" => SoftmaxOverAxis,
            "avgpool2d" => AvgPool2d,
            "maxpool2d" => MaxPool2d,
            "global_avgpool" => GlobalAvgPool,
            "affine_channel_norm" => AffineChannelNorm,
            "concat_channels" => ConcatChannels,
            "scale_channels" => ScaleChannels,
            "flatten" => Flatten,
            "linear" => Linear,
            "cross_entropy_with_logits" => CrossEntropyWithLogits,
            "scalar_mul" => ScalarMul,
            "dropout_mask_apply" => DropoutMaskApply,
            _ => return Err(Error::Catalog { name: name.to_string(), catalog: CATALOG }),
        })
    }

    pub fn name(self) -> &'static str {
        use PrimitiveId::*;
        match self {
            Add => "add",
            Mul => "mul",
            Matmul => "matmul",
            Conv2d => "conv2d",
            Relu => "relu",
            Sigmoid => "sigmoid",
            SoftmaxOverAxis => "softmax_over_axis",
            AvgPool2d => "avgpool2d",
            MaxPool2d => "maxpool2d",
            GlobalAvgPool => "global_avgpool",
            AffineChannelNorm => "affine_channel_norm",
            ConcatChannels => "concat_channels",
            ScaleChannels => "scale_channels",
            Flatten => "flatten",
            Linear => "linear",
            CrossEntropyWithLogits => "cross_entropy_with_logits",
            ScalarMul => "scalar_mul",
            DropoutMaskApply => "dropout_mask_apply",
        }
    }
}

/// Attribute map for `Tape::apply`. Each primitive reads the fields its
/// shape rule documents and ignores the rest.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub dilation: Option<usize>,
    pub groups: Option<usize>,
    pub kernel: Option<usize>,
    pub axis: Option<usize>,
    pub scalar: Option<f64>,
    pub eps: Option<f64>,
    pub use_batch_stats: Option<bool>,
    pub mean: Option<Vec<f64>>,
    pub var: Option<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub mask: Option<Vec<f64>>,
}

/// Saved operation record: input handles plus whatever the backward pass
/// needs beyond the arena values.
#[derive(Debug, Clone)]
enum OpRecord {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScalarMul { x: NodeId, c: f64 },
    Matmul { a: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, spec: ConvSpec, kh: usize, kw: usize },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    AvgPool2d { x: NodeId, k: usize, stride: usize, padding: usize },
    MaxPool2d { x: NodeId, argmax: Vec<u32> },
    GlobalAvgPool { x: NodeId },
    ChannelNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mean: Vec<f64>, var: Vec<f64>, batch_stats: bool },
    ConcatChannels { xs: Vec<NodeId> },
    ScaleChannels { x: NodeId, s: NodeId },
    Flatten { x: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    DropoutMask { x: NodeId, mask: Vec<f64> },
}

impl OpRecord {
    fn primitive(&self) -> Option<PrimitiveId> {
        use OpRecord::*;
        Some(match self {
            Leaf => return None,
            Add { .. } => PrimitiveId::Add,
            Mul { .. } => PrimitiveId::Mul,
            ScalarMul { .. } => PrimitiveId::ScalarMul,
            Matmul { .. } => PrimitiveId::Matmul,
            Linear { .. } => PrimitiveId::Linear,
            Conv2d { .. } => PrimitiveId::Conv2d,
            Relu { .. } => PrimitiveId::Relu,
            Sigmoid { .. } => PrimitiveId::Sigmoid,
            Softmax { .. } => PrimitiveId::SoftmaxOverAxis,
            AvgPool2d { .. } => PrimitiveId::AvgPool2d,
            MaxPool2d { .. } => PrimitiveId::MaxPool2d,
            GlobalAvgPool { .. } => PrimitiveId::GlobalAvgPool,
            ChannelNorm { .. } => PrimitiveId::AffineChannelNorm,
            ConcatChannels { .. } => PrimitiveId::ConcatChannels,
            ScaleChannels { .. } => PrimitiveId::ScaleChannels,
            Flatten { .. } => PrimitiveId::Flatten,
            CrossEntropy { .. } => PrimitiveId::CrossEntropyWithLogits,
            DropoutMask { .. } => PrimitiveId::DropoutMaskApply,
        })
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: OpRecord,
}

/// Per-node gradient buffers produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: bool,
    backward_fault: Option<PrimitiveId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Test hook: sign-flip the input gradients of one primitive during
    /// backward, to prove the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, p: PrimitiveId) {
        self.backward_fault = Some(p);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Drop all nodes and saved activations; the tape is reusable after.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.frozen = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, OpRecord::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: OpRecord) -> NodeId {
        debug_assert!(!self.frozen, "push on frozen tape");
        let id = self.nodes.len();
        self.nodes.push(Node { value, requires_grad, op });
        id
    }

    fn check_open(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("tape is frozen after backward; call reset() first"));
        }
        Ok(())
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Uniform entry point over the primitive catalog; the typed methods
    /// below are the implementation it dispatches to.
    pub fn apply(&mut self, prim: PrimitiveId, inputs: &[NodeId], attrs: &Attrs) -> Result<NodeId> {
        use PrimitiveId::*;
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::dimension(
                    prim.name(),
                    format!("expected {} inputs, got {}", n, inputs.len()),
                ));
            }
            Ok(())
        };
        match prim {
            Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Conv2d => {
                arity(2)?;
                let spec = ConvSpec {
                    stride: attrs.stride.unwrap_or(1),
                    padding: attrs.padding.unwrap_or(0),
                    dilation: attrs.dilation.unwrap_or(1),
                    groups: attrs.groups.unwrap_or(1),
                };
                self.conv2d(inputs[0], inputs[1], spec)
            }
            Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            SoftmaxOverAxis => {
                arity(1)?;
                self.softmax(inputs[0], attrs.axis.unwrap_or(0))
            }
            AvgPool2d => {
                arity(1)?;
                self.avgpool2d(
                    inputs[0],
                    attrs.kernel.unwrap_or(3),
                    attrs.stride.unwrap_or(1),
                    attrs.padding.unwrap_or(0),
                )
            }
            MaxPool2d => {
                arity(1)?;
                self.maxpool2d(
                    inputs[0],
                    attrs.kernel.unwrap_or(3),
                    attrs.stride.unwrap_or(1),
                    attrs.padding.unwrap_or(0),
                )
            }
            GlobalAvgPool => {
                arity(1)?;
                self.global_avgpool(inputs[0])
            }
            AffineChannelNorm => {
                arity(3)?;
                let eps = attrs.eps.unwrap_or(1e-5);
                if attrs.use_batch_stats.unwrap_or(true) {
                    self.channel_norm_batch(inputs[0], inputs[1], inputs[2], eps)
                } else {
                    let mean = attrs.mean.clone().ok_or_else(|| {
                        Error::contract("affine_channel_norm without batch stats needs mean attr")
                    })?;
                    let var = attrs.var.clone().ok_or_else(|| {
                        Error::contract("affine_channel_norm without batch stats needs var attr")
                    })?;
                    self.channel_norm_frozen(inputs[0], inputs[1], inputs[2], eps, mean, var)
                }
            }
            ConcatChannels => self.concat_channels(inputs),
            ScaleChannels => {
                arity(2)?;
                self.scale_channels(inputs[0], inputs[1])
            }
            Flatten => {
                arity(1)?;
                self.flatten(inputs[0])
            }
            Linear => {
                arity(3)?;
                self.linear(inputs[0], inputs[1], inputs[2])
            }
            CrossEntropyWithLogits => {
                arity(1)?;
                let labels = attrs
                    .labels
                    .clone()
                    .ok_or_else(|| Error::contract("cross_entropy_with_logits needs labels attr"))?;
                self.cross_entropy_logits(inputs[0], &labels)
            }
            ScalarMul => {
                arity(1)?;
                self.scalar_mul(inputs[0], attrs.scalar.unwrap_or(1.0))
            }
            DropoutMaskApply => {
                arity(1)?;
                let mask = attrs
                    .mask
                    .clone()
                    .ok_or_else(|| Error::contract("dropout_mask_apply needs mask attr"))?;
                self.dropout_mask(inputs[0], mask)
            }
        }
    }

    // ── elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(
                "add",
                format!("shape {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, OpRecord::Add { a, b }))
    }

    /// Elementwise product. When one side is a single-element tensor it
    /// broadcasts over the other (used to weight mixed-op outputs).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let na = self.nodes[a].value.numel();
        let nb = self.nodes[b].value.numel();
        if sa != sb && na != 1 && nb != 1 {
            return Err(Error::dimension(
                "mul",
                format!("shape {:?} vs {:?} (no scalar side)", sa, sb),
            ));
        }
        let (out_shape, data) = if sa == sb {
            let d = self.nodes[a]
                .value
                .data()
                .iter()
                .zip(self.nodes[b].value.data())
                .map(|(x, y)| x * y)
                .collect();
            (sa, d)
        } else if na == 1 {
            let s = self.nodes[a].value.data()[0];
            (sb, self.nodes[b].value.data().iter().map(|y| s * y).collect())
        } else {
            let s = self.nodes[b].value.data()[0];
            (sa, self.nodes[a].value.data().iter().map(|x| x * s).collect())
        };
        let value = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, OpRecord::Mul { a, b }))
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check_open()?;
        let data = self.nodes[x].value.data().iter().map(|v| c * v).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, OpRecord::ScalarMul { x, c }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let data = self.nodes[x].value.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, OpRecord::Relu { x }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let data = self.nodes[x].value.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, OpRecord::Sigmoid { x }))
    }

    pub fn dropout_mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        self.check_open()?;
        if mask.len() != self.nodes[x].value.numel() {
            return Err(Error::dimension(
                "dropout_mask_apply",
                format!("mask has {} elements, input {}", mask.len(), self.nodes[x].value.numel()),
            ));
        }
        let data = self.nodes[x].value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, OpRecord::DropoutMask { x, mask }))
    }

    // ── linear algebra ───────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(
                "matmul",
                format!("incompatible shapes {:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.nodes[a].value.data(), self.nodes[b].value.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, OpRecord::Matmul { a, b }))
    }

    /// y = x·w + b with x (B,I), w (I,O), b (O).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sb[0] != sw[1] {
            return Err(Error::dimension(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", sx, sw, sb),
            ));
        }
        let (batch, i, o) = (sx[0], sx[1], sw[1]);
        let mut data =
            kernels::matmul(self.nodes[x].value.data(), self.nodes[w].value.data(), batch, i, o);
        let bias = self.nodes[b].value.data();
        for r in 0..batch {
            for c in 0..o {
                data[r * o + c] += bias[c];
            }
        }
        let value = Tensor::new(vec![batch, o], data)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, rg, OpRecord::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> Result<NodeId> {
        self.check_open()?;
        let xd = dims4("conv2d", self.shape(x))?;
        let sw = self.shape(w).to_vec();
        if sw.len() != 4 {
            return Err(Error::dimension("conv2d", format!("weight must be 4-D, got {:?}", sw)));
        }
        let (co, ci_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if spec.groups == 0 || xd.c % spec.groups != 0 || co % spec.groups != 0 {
            return Err(Error::dimension(
                "conv2d",
                format!("groups {} must divide in-channels {} and out-channels {}", spec.groups, xd.c, co),
            ));
        }
        if ci_g != xd.c / spec.groups {
            return Err(Error::dimension(
                "conv2d",
                format!("weight in-channel axis {} != input channels {} / groups {}", ci_g, xd.c, spec.groups),
            ));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::dimension("conv2d", "stride and dilation must be positive"));
        }
        if kernels::conv_out_dim(xd.h, kh, spec.stride, spec.padding, spec.dilation).is_none()
            || kernels::conv_out_dim(xd.w, kw, spec.stride, spec.padding, spec.dilation).is_none()
        {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel {}x{} (dilation {}) exceeds padded input {}x{}", kh, kw, spec.dilation, xd.h, xd.w),
            ));
        }
        let (data, od) =
            kernels::conv2d_forward(self.nodes[x].value.data(), xd, self.nodes[w].value.data(), co, kh, kw, spec);
        let value = Tensor::new(vec![od.n, od.c, od.h, od.w], data)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(value, rg, OpRecord::Conv2d { x, w, spec, kh, kw }))
    }

    // ── reductions / shape ───────────────────────────────────────

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_open()?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dimension(
                "softmax_over_axis",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let data = kernels::softmax_axis(self.nodes[x].value.data(), &shape, axis);
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, OpRecord::Softmax { x, axis }))
    }

    fn pool_check(&self, name: &'static str, x: NodeId, k: usize, stride: usize, padding: usize) -> Result<Dims4> {
        let xd = dims4(name, self.shape(x))?;
        if k == 0 || stride == 0 {
            return Err(Error::dimension(name, "kernel and stride must be positive"));
        }
        if padding > k / 2 {
            return Err(Error::dimension(
                name,
                format!("padding {} exceeds half the kernel {}", padding, k),
            ));
        }
        if kernels::conv_out_dim(xd.h, k, stride, padding, 1).is_none()
            || kernels::conv_out_dim(xd.w, k, stride, padding, 1).is_none()
        {
            return Err(Error::dimension(
                name,
                format!("window {} exceeds padded input {}x{}", k, xd.h, xd.w),
            ));
        }
        Ok(xd)
    }

    pub fn avgpool2d(&mut self, x: NodeId, k: usize, stride: usize, padding: usize) -> Result<NodeId> {
        self.check_open()?;
        let xd = self.pool_check("avgpool2d", x, k, stride, padding)?;
        let (data, od) = kernels::avgpool2d_forward(self.nodes[x].value.data(), xd, k, stride, padding);
        let value = Tensor::new(vec![od.n, od.c, od.h, od.w], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, OpRecord::AvgPool2d { x, k, stride, padding }))
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize, padding: usize) -> Result<NodeId> {
        self.check_open()?;
        let xd = self.pool_check("maxpool2d", x, k, stride, padding)?;
        let (data, argmax, od) = kernels::maxpool2d_forward(self.nodes[x].value.data(), xd, k, stride, padding);
        let value = Tensor::new(vec![od.n, od.c, od.h, od.w], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, OpRecord::MaxPool2d { x, argmax }))
    }

    /// (B,C,H,W) → (B,C) spatial mean.
    pub fn global_avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let xd = dims4("global_avgpool", self.shape(x))?;
        let area = (xd.h * xd.w) as f64;
        let src = self.nodes[x].value.data();
        let mut data = vec![0.0; xd.n * xd.c];
        for nc in 0..xd.n * xd.c {
            let base = nc * xd.h * xd.w;
            data[nc] = src[base..base + xd.h * xd.w].iter().sum::<f64>() / area;
        }
        let value = Tensor::new(vec![xd.n, xd.c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, OpRecord::GlobalAvgPool { x }))
    }

    /// Per-channel mean and biased variance of a 4-D node over (N,H,W).
    pub fn channel_statistics(&self, x: NodeId) -> Result<(Vec<f64>, Vec<f64>)> {
        let xd = dims4("affine_channel_norm", self.shape(x))?;
        Ok(self.channel_stats(x, xd))
    }

    fn channel_stats(&self, x: NodeId, xd: Dims4) -> (Vec<f64>, Vec<f64>) {
        let src = self.nodes[x].value.data();
        let m = (xd.n * xd.h * xd.w) as f64;
        let area = xd.h * xd.w;
        let mut mean = vec![0.0; xd.c];
        let mut var = vec![0.0; xd.c];
        for c in 0..xd.c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for n in 0..xd.n {
                let base = (n * xd.c + c) * area;
                for v in &src[base..base + area] {
                    sum += v;
                    sq += v * v;
                }
            }
            mean[c] = sum / m;
            var[c] = (sq / m - mean[c] * mean[c]).max(0.0);
        }
        (mean, var)
    }

    /// Normalize per channel with statistics of this batch (training path).
    pub fn channel_norm_batch(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.check_open()?;
        let xd = dims4("affine_channel_norm", self.shape(x))?;
        self.norm_affine_check(xd, gamma, beta)?;
        let (mean, var) = self.channel_stats(x, xd);
        self.channel_norm_with(x, gamma, beta, eps, mean, var, true, xd)
    }

    /// Normalize per channel with externally supplied (frozen) statistics.
    pub fn channel_norm_frozen(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    ) -> Result<NodeId> {
        self.check_open()?;
        let xd = dims4("affine_channel_norm", self.shape(x))?;
        self.norm_affine_check(xd, gamma, beta)?;
        if mean.len() != xd.c || var.len() != xd.c {
            return Err(Error::dimension(
                "affine_channel_norm",
                format!("running stats length {}/{} != channels {}", mean.len(), var.len(), xd.c),
            ));
        }
        self.channel_norm_with(x, gamma, beta, eps, mean, var, false, xd)
    }

    fn norm_affine_check(&self, xd: Dims4, gamma: NodeId, beta: NodeId) -> Result<()> {
        if self.shape(gamma) != [xd.c] || self.shape(beta) != [xd.c] {
            return Err(Error::dimension(
                "affine_channel_norm",
                format!(
                    "gamma {:?} / beta {:?} must both be [{}]",
                    self.shape(gamma),
                    self.shape(beta),
                    xd.c
                ),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn channel_norm_with(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        batch_stats: bool,
        xd: Dims4,
    ) -> Result<NodeId> {
        let src = self.nodes[x].value.data();
        let g = self.nodes[gamma].value.data();
        let b = self.nodes[beta].value.data();
        let area = xd.h * xd.w;
        let mut data = vec![0.0; src.len()];
        for n in 0..xd.n {
            for c in 0..xd.c {
                let inv = 1.0 / (var[c] + eps).sqrt();
                let base = (n * xd.c + c) * area;
                for i in 0..area {
                    data[base + i] = g[c] * (src[base + i] - mean[c]) * inv + b[c];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, rg, OpRecord::ChannelNorm { x, gamma, beta, eps, mean, var, batch_stats }))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.check_open()?;
        if xs.is_empty() {
            return Err(Error::dimension("concat_channels", "needs at least one input"));
        }
        let first = dims4("concat_channels", self.shape(xs[0]))?;
        let mut total_c = 0;
        for &x in xs {
            let d = dims4("concat_channels", self.shape(x))?;
            if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
                return Err(Error::dimension(
                    "concat_channels",
                    format!("batch/spatial mismatch: {:?} vs {:?}", self.shape(xs[0]), self.shape(x)),
                ));
            }
            total_c += d.c;
        }
        let area = first.h * first.w;
        let mut data = vec![0.0; first.n * total_c * area];
        for n in 0..first.n {
            let mut c_off = 0;
            for &x in xs {
                let d = dims4("concat_channels", self.shape(x))?;
                let src = self.nodes[x].value.data();
                let src_base = n * d.c * area;
                let dst_base = (n * total_c + c_off) * area;
                data[dst_base..dst_base + d.c * area]
                    .copy_from_slice(&src[src_base..src_base + d.c * area]);
                c_off += d.c;
            }
        }
        let value = Tensor::new(vec![first.n, total_c, first.h, first.w], data)?;
        let rg = self.any_grad(xs);
        Ok(self.push(value, rg, OpRecord::ConcatChannels { xs: xs.to_vec() }))
    }

    /// Scale x (B,C,H,W) per channel by gates s (B,C).
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let xd = dims4("scale_channels", self.shape(x))?;
        if self.shape(s) != [xd.n, xd.c] {
            return Err(Error::dimension(
                "scale_channels",
                format!("gates {:?} must be [{}, {}]", self.shape(s), xd.n, xd.c),
            ));
        }
        let src = self.nodes[x].value.data();
        let gates = self.nodes[s].value.data();
        let area = xd.h * xd.w;
        let mut data = vec![0.0; src.len()];
        for nc in 0..xd.n * xd.c {
            let gate = gates[nc];
            let base = nc * area;
            for i in 0..area {
                data[base + i] = src[base + i] * gate;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, rg, OpRecord::ScaleChannels { x, s }))
    }

    /// (B, rest...) → (B, prod(rest))
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dimension("flatten", format!("needs rank >= 2, got {:?}", shape)));
        }
        let rest: usize = shape[1..].iter().product();
        let value = Tensor::new(vec![shape[0], rest], self.nodes[x].value.data().to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, OpRecord::Flatten { x }))
    }

    /// Mean cross-entropy over the batch, from raw logits (B,K).
    pub fn cross_entropy_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check_open()?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::dimension(
                "cross_entropy_with_logits",
                format!("logits must be (B,K), got {:?}", shape),
            ));
        }
        let (batch, k) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(Error::dimension(
                "cross_entropy_with_logits",
                format!("{} labels for batch {}", labels.len(), batch),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dimension(
                "cross_entropy_with_logits",
                format!("label {} out of range for {} classes", bad, k),
            ));
        }
        let src = self.nodes[logits].value.data();
        let probs = kernels::softmax_axis(src, &shape, 1);
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &src[b * k..(b + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= batch as f64;
        let value = Tensor::scalar(loss);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, rg, OpRecord::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates a gradient buffer for
    /// every `requires_grad` node reachable from the loss (unreachable
    /// requires-grad leaves get zeros) and freezes the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.frozen {
            return Err(Error::contract("backward on a frozen tape (already replayed)"));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        self.frozen = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // leaves that never received a contribution have zero gradient
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, OpRecord::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let fault = self.backward_fault.is_some() && self.backward_fault == node.op.primitive();
        let send = |grads: &mut [Option<Vec<f64>>], dst: NodeId, contrib: Vec<f64>| {
            if !self.nodes[dst].requires_grad {
                return;
            }
            let contrib = if fault { contrib.iter().map(|v| -v).collect() } else { contrib };
            match &mut grads[dst] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(&contrib) {
                        *b += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            OpRecord::Leaf => {}
            OpRecord::Add { a, b } => {
                send(grads, *a, g.to_vec());
                send(grads, *b, g.to_vec());
            }
            OpRecord::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if av.len() == bv.len() {
                    send(grads, *a, g.iter().zip(bv).map(|(gi, y)| gi * y).collect());
                    send(grads, *b, g.iter().zip(av).map(|(gi, x)| gi * x).collect());
                } else if av.len() == 1 {
                    send(grads, *a, vec![g.iter().zip(bv).map(|(gi, y)| gi * y).sum()]);
                    send(grads, *b, g.iter().map(|gi| gi * av[0]).collect());
                } else {
                    send(grads, *a, g.iter().map(|gi| gi * bv[0]).collect());
                    send(grads, *b, vec![g.iter().zip(av).map(|(gi, x)| gi * x).sum()]);
                }
            }
            OpRecord::ScalarMul { x, c } => {
                send(grads, *x, g.iter().map(|gi| gi * c).collect());
            }
            OpRecord::Matmul { a, b } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = kernels::matmul_nt(g, self.nodes[*b].value.data(), m, n, k);
                let db = kernels::matmul_tn(self.nodes[*a].value.data(), g, m, k, n);
                send(grads, *a, da);
                send(grads, *b, db);
            }
            OpRecord::Linear { x, w, b } => {
                let sx = self.nodes[*x].value.shape();
                let sw = self.nodes[*w].value.shape();
                let (batch, i_dim, o) = (sx[0], sx[1], sw[1]);
                let dx = kernels::matmul_nt(g, self.nodes[*w].value.data(), batch, o, i_dim);
                let dw = kernels::matmul_tn(self.nodes[*x].value.data(), g, batch, i_dim, o);
                let mut db = vec![0.0; o];
                for r in 0..batch {
                    for c in 0..o {
                        db[c] += g[r * o + c];
                    }
                }
                send(grads, *x, dx);
                send(grads, *w, dw);
                send(grads, *b, db);
            }
            OpRecord::Conv2d { x, w, spec, kh, kw } => {
                let xd = dims4("conv2d", self.nodes[*x].value.shape()).expect("validated");
                let od = dims4("conv2d", node.value.shape()).expect("validated");
                let dx = kernels::conv2d_backward_input(g, od, self.nodes[*w].value.data(), xd, *kh, *kw, *spec);
                let dw = kernels::conv2d_backward_weight(g, od, self.nodes[*x].value.data(), xd, *kh, *kw, *spec);
                send(grads, *x, dx);
                send(grads, *w, dw);
            }
            OpRecord::Relu { x } => {
                let xv = self.nodes[*x].value.data();
                send(grads, *x, g.iter().zip(xv).map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 }).collect());
            }
            OpRecord::Sigmoid { x } => {
                let y = node.value.data();
                send(grads, *x, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect());
            }
            OpRecord::Softmax { x, axis } => {
                let dx = kernels::softmax_backward(g, node.value.data(), node.value.shape(), *axis);
                send(grads, *x, dx);
            }
            OpRecord::AvgPool2d { x, k, stride, padding } => {
                let xd = dims4("avgpool2d", self.nodes[*x].value.shape()).expect("validated");
                let od = dims4("avgpool2d", node.value.shape()).expect("validated");
                send(grads, *x, kernels::avgpool2d_backward(g, od, xd, *k, *stride, *padding));
            }
            OpRecord::MaxPool2d { x, argmax, .. } => {
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for (gi, &idx) in g.iter().zip(argmax) {
                    dx[idx as usize] += gi;
                }
                send(grads, *x, dx);
            }
            OpRecord::GlobalAvgPool { x } => {
                let xd = dims4("global_avgpool", self.nodes[*x].value.shape()).expect("validated");
                let area = xd.h * xd.w;
                let scale = 1.0 / area as f64;
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for nc in 0..xd.n * xd.c {
                    let gv = g[nc] * scale;
                    let base = nc * area;
                    for v in &mut dx[base..base + area] {
                        *v = gv;
                    }
                }
                send(grads, *x, dx);
            }
            OpRecord::ChannelNorm { x, gamma, beta, eps, mean, var, batch_stats } => {
                let xd = dims4("affine_channel_norm", self.nodes[*x].value.shape()).expect("validated");
                let src = self.nodes[*x].value.data();
                let gv = self.nodes[*gamma].value.data();
                let area = xd.h * xd.w;
                let m = (xd.n * area) as f64;
                let mut dgamma = vec![0.0; xd.c];
                let mut dbeta = vec![0.0; xd.c];
                let mut dx = vec![0.0; src.len()];
                for c in 0..xd.c {
                    let inv = 1.0 / (var[c] + eps).sqrt();
                    // channel-wide reductions
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for n in 0..xd.n {
                        let base = (n * xd.c + c) * area;
                        for i in 0..area {
                            let xhat = (src[base + i] - mean[c]) * inv;
                            sum_g += g[base + i];
                            sum_gx += g[base + i] * xhat;
                        }
                    }
                    dgamma[c] = sum_gx;
                    dbeta[c] = sum_g;
                    for n in 0..xd.n {
                        let base = (n * xd.c + c) * area;
                        for i in 0..area {
                            let xhat = (src[base + i] - mean[c]) * inv;
                            dx[base + i] = if *batch_stats {
                                gv[c] * inv * (g[base + i] - sum_g / m - xhat * (sum_gx / m))
                            } else {
                                gv[c] * inv * g[base + i]
                            };
                        }
                    }
                }
                send(grads, *x, dx);
                send(grads, *gamma, dgamma);
                send(grads, *beta, dbeta);
            }
            OpRecord::ConcatChannels { xs } => {
                let od = dims4("concat_channels", node.value.shape()).expect("validated");
                let area = od.h * od.w;
                let mut c_off = 0;
                for &x in xs {
                    let d = dims4("concat_channels", self.nodes[x].value.shape()).expect("validated");
                    let mut dx = vec![0.0; self.nodes[x].value.numel()];
                    for n in 0..od.n {
                        let src_base = (n * od.c + c_off) * area;
                        let dst_base = n * d.c * area;
                        dx[dst_base..dst_base + d.c * area]
                            .copy_from_slice(&g[src_base..src_base + d.c * area]);
                    }
                    send(grads, x, dx);
                    c_off += d.c;
                }
            }
            OpRecord::ScaleChannels { x, s } => {
                let xd = dims4("scale_channels", self.nodes[*x].value.shape()).expect("validated");
                let area = xd.h * xd.w;
                let xv = self.nodes[*x].value.data();
                let sv = self.nodes[*s].value.data();
                let mut dx = vec![0.0; xv.len()];
                let mut ds = vec![0.0; sv.len()];
                for nc in 0..xd.n * xd.c {
                    let base = nc * area;
                    let gate = sv[nc];
                    let mut acc = 0.0;
                    for i in 0..area {
                        dx[base + i] = g[base + i] * gate;
                        acc += g[base + i] * xv[base + i];
                    }
                    ds[nc] = acc;
                }
                send(grads, *x, dx);
                send(grads, *s, ds);
            }
            OpRecord::Flatten { x } => {
                send(grads, *x, g.to_vec());
            }
            OpRecord::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[*logits].value.shape()[1];
                let batch = labels.len();
                let scale = g[0] / batch as f64;
                let mut dl = vec![0.0; probs.len()];
                for (b, &label) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        dl[b * k + c] = scale * (probs[b * k + c] - onehot);
                    }
                }
                send(grads, *logits, dl);
            }
            OpRecord::DropoutMask { x, mask } => {
                send(grads, *x, g.iter().zip(mask).map(|(gi, m)| gi * m).collect());
            }
        }
    }
}
