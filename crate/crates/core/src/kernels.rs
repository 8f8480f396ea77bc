//! Raw array kernels behind the tape primitives.
//!
//! Everything here is pure: flat `&[f64]` buffers in, `Vec<f64>` out.
//! Loop nests are ordered so the innermost dimension walks contiguous
//! memory; hot paths (convolution) precompute valid output ranges instead
//! of bounds-checking per element.

use crate::tensor::Dims4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn unit(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding, dilation: 1, groups: 1 }
    }
}

/// Output extent of a conv/pool axis, or None when the kernel does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let effective = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < effective {
        return None;
    }
    Some((padded - effective) / stride + 1)
}

/// Valid output range [lo, hi) along one axis for kernel tap offset `tap`,
/// such that the corresponding input index stays inside [0, input).
fn valid_range(out_len: usize, input: usize, stride: usize, padding: usize, tap_off: usize) -> (usize, usize) {
    // in = out*stride + tap_off - padding
    let lo = if tap_off >= padding {
        0
    } else {
        let need = padding - tap_off;
        need.div_ceil(stride)
    };
    let hi = if input + padding > tap_off {
        (((input + padding - tap_off - 1) / stride) + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Grouped 2-D convolution. `x` is (N,Ci,H,W), `w` is (Co, Ci/groups, Kh, Kw).
pub fn conv2d_forward(
    x: &[f64],
    xd: Dims4,
    w: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> (Vec<f64>, Dims4) {
    let ho_n = conv_out_dim(xd.h, kh, spec.stride, spec.padding, spec.dilation).expect("validated");
    let wo_n = conv_out_dim(xd.w, kw, spec.stride, spec.padding, spec.dilation).expect("validated");
    let od = Dims4 { n: xd.n, c: co, h: ho_n, w: wo_n };
    let mut out = vec![0.0; xd.n * co * ho_n * wo_n];
    let ci_g = xd.c / spec.groups;
    let co_g = co / spec.groups;
    for n in 0..xd.n {
        for g in 0..spec.groups {
            for oc in 0..co_g {
                let oc_abs = g * co_g + oc;
                let out_base = (n * co + oc_abs) * ho_n * wo_n;
                for ic in 0..ci_g {
                    let ic_abs = g * ci_g + ic;
                    let x_base = (n * xd.c + ic_abs) * xd.h * xd.w;
                    let w_base = (oc_abs * ci_g + ic) * kh * kw;
                    for r in 0..kh {
                        let (ho_lo, ho_hi) =
                            valid_range(ho_n, xd.h, spec.stride, spec.padding, r * spec.dilation);
                        for s in 0..kw {
                            let wv = w[w_base + r * kw + s];
                            let (wo_lo, wo_hi) =
                                valid_range(wo_n, xd.w, spec.stride, spec.padding, s * spec.dilation);
                            let x_col_off = (s * spec.dilation) as isize - spec.padding as isize;
                            for ho in ho_lo..ho_hi {
                                let hi = ho * spec.stride + r * spec.dilation - spec.padding;
                                let base = (x_base + hi * xd.w) as isize + x_col_off;
                                let o_row = out_base + ho * wo_n;
                                if spec.stride == 1 {
                                    let xs = (base + wo_lo as isize) as usize;
                                    for (k, wo) in (wo_lo..wo_hi).enumerate() {
                                        out[o_row + wo] += wv * x[xs + k];
                                    }
                                } else {
                                    for wo in wo_lo..wo_hi {
                                        let xi = (base + (wo * spec.stride) as isize) as usize;
                                        out[o_row + wo] += wv * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, od)
}

/// Gradient of conv2d with respect to its input.
pub fn conv2d_backward_input(
    dy: &[f64],
    od: Dims4,
    w: &[f64],
    xd: Dims4,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> Vec<f64> {
    let mut dx = vec![0.0; xd.n * xd.c * xd.h * xd.w];
    let ci_g = xd.c / spec.groups;
    let co_g = od.c / spec.groups;
    for n in 0..xd.n {
        for g in 0..spec.groups {
            for oc in 0..co_g {
                let oc_abs = g * co_g + oc;
                let dy_base = (n * od.c + oc_abs) * od.h * od.w;
                for ic in 0..ci_g {
                    let ic_abs = g * ci_g + ic;
                    let x_base = (n * xd.c + ic_abs) * xd.h * xd.w;
                    let w_base = (oc_abs * ci_g + ic) * kh * kw;
                    for r in 0..kh {
                        let (ho_lo, ho_hi) =
                            valid_range(od.h, xd.h, spec.stride, spec.padding, r * spec.dilation);
                        for s in 0..kw {
                            let wv = w[w_base + r * kw + s];
                            if wv == 0.0 {
                                continue;
                            }
                            let (wo_lo, wo_hi) =
                                valid_range(od.w, xd.w, spec.stride, spec.padding, s * spec.dilation);
                            let x_col_off = (s * spec.dilation) as isize - spec.padding as isize;
                            for ho in ho_lo..ho_hi {
                                let hi = ho * spec.stride + r * spec.dilation - spec.padding;
                                let base = (x_base + hi * xd.w) as isize + x_col_off;
                                let dy_row = dy_base + ho * od.w;
                                for wo in wo_lo..wo_hi {
                                    let xi = (base + (wo * spec.stride) as isize) as usize;
                                    dx[xi] += wv * dy[dy_row + wo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of conv2d with respect to its weights.
pub fn conv2d_backward_weight(
    dy: &[f64],
    od: Dims4,
    x: &[f64],
    xd: Dims4,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> Vec<f64> {
    let ci_g = xd.c / spec.groups;
    let co_g = od.c / spec.groups;
    let mut dw = vec![0.0; od.c * ci_g * kh * kw];
    for n in 0..xd.n {
        for g in 0..spec.groups {
            for oc in 0..co_g {
                let oc_abs = g * co_g + oc;
                let dy_base = (n * od.c + oc_abs) * od.h * od.w;
                for ic in 0..ci_g {
                    let ic_abs = g * ci_g + ic;
                    let x_base = (n * xd.c + ic_abs) * xd.h * xd.w;
                    let w_base = (oc_abs * ci_g + ic) * kh * kw;
                    for r in 0..kh {
                        let (ho_lo, ho_hi) =
                            valid_range(od.h, xd.h, spec.stride, spec.padding, r * spec.dilation);
                        for s in 0..kw {
                            let (wo_lo, wo_hi) =
                                valid_range(od.w, xd.w, spec.stride, spec.padding, s * spec.dilation);
                            let x_col_off = (s * spec.dilation) as isize - spec.padding as isize;
                            let mut acc = 0.0;
                            for ho in ho_lo..ho_hi {
                                let hi = ho * spec.stride + r * spec.dilation - spec.padding;
                                let base = (x_base + hi * xd.w) as isize + x_col_off;
                                let dy_row = dy_base + ho * od.w;
                                if spec.stride == 1 {
                                    let xs = (base + wo_lo as isize) as usize;
                                    for (k, wo) in (wo_lo..wo_hi).enumerate() {
                                        acc += dy[dy_row + wo] * x[xs + k];
                                    }
                                } else {
                                    for wo in wo_lo..wo_hi {
                                        let xi = (base + (wo * spec.stride) as isize) as usize;
                                        acc += dy[dy_row + wo] * x[xi];
                                    }
                                }
                            }
                            dw[w_base + r * kw + s] += acc;
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Average pooling ignoring padded cells (each output divides by the number
/// of in-bounds window cells).
pub fn avgpool2d_forward(x: &[f64], xd: Dims4, k: usize, stride: usize, padding: usize) -> (Vec<f64>, Dims4) {
    let ho_n = conv_out_dim(xd.h, k, stride, padding, 1).expect("validated");
    let wo_n = conv_out_dim(xd.w, k, stride, padding, 1).expect("validated");
    let od = Dims4 { n: xd.n, c: xd.c, h: ho_n, w: wo_n };
    let mut out = vec![0.0; xd.n * xd.c * ho_n * wo_n];
    for nc in 0..xd.n * xd.c {
        let x_base = nc * xd.h * xd.w;
        let o_base = nc * ho_n * wo_n;
        for ho in 0..ho_n {
            for wo in 0..wo_n {
                let h0 = (ho * stride) as isize - padding as isize;
                let w0 = (wo * stride) as isize - padding as isize;
                let mut acc = 0.0;
                let mut count = 0usize;
                for r in 0..k as isize {
                    let hi = h0 + r;
                    if hi < 0 || hi >= xd.h as isize {
                        continue;
                    }
                    for s in 0..k as isize {
                        let wi = w0 + s;
                        if wi < 0 || wi >= xd.w as isize {
                            continue;
                        }
                        acc += x[x_base + hi as usize * xd.w + wi as usize];
                        count += 1;
                    }
                }
                out[o_base + ho * wo_n + wo] = acc / count as f64;
            }
        }
    }
    (out, od)
}

pub fn avgpool2d_backward(dy: &[f64], od: Dims4, xd: Dims4, k: usize, stride: usize, padding: usize) -> Vec<f64> {
    let mut dx = vec![0.0; xd.n * xd.c * xd.h * xd.w];
    for nc in 0..xd.n * xd.c {
        let x_base = nc * xd.h * xd.w;
        let o_base = nc * od.h * od.w;
        for ho in 0..od.h {
            for wo in 0..od.w {
                let h0 = (ho * stride) as isize - padding as isize;
                let w0 = (wo * stride) as isize - padding as isize;
                let mut count = 0usize;
                for r in 0..k as isize {
                    let hi = h0 + r;
                    if hi < 0 || hi >= xd.h as isize {
                        continue;
                    }
                    for s in 0..k as isize {
                        if w0 + s < 0 || w0 + s >= xd.w as isize {
                            continue;
                        }
                        count += 1;
                    }
                }
                let g = dy[o_base + ho * od.w + wo] / count as f64;
                for r in 0..k as isize {
                    let hi = h0 + r;
                    if hi < 0 || hi >= xd.h as isize {
                        continue;
                    }
                    for s in 0..k as isize {
                        let wi = w0 + s;
                        if wi < 0 || wi >= xd.w as isize {
                            continue;
                        }
                        dx[x_base + hi as usize * xd.w + wi as usize] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling; padded cells never win. Returns values plus the flat input
/// index of each winner (first maximum in scan order) for the backward pass.
pub fn maxpool2d_forward(
    x: &[f64],
    xd: Dims4,
    k: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<u32>, Dims4) {
    let ho_n = conv_out_dim(xd.h, k, stride, padding, 1).expect("validated");
    let wo_n = conv_out_dim(xd.w, k, stride, padding, 1).expect("validated");
    let od = Dims4 { n: xd.n, c: xd.c, h: ho_n, w: wo_n };
    let numel = xd.n * xd.c * ho_n * wo_n;
    let mut out = vec![0.0; numel];
    let mut argmax = vec![0u32; numel];
    for nc in 0..xd.n * xd.c {
        let x_base = nc * xd.h * xd.w;
        let o_base = nc * ho_n * wo_n;
        for ho in 0..ho_n {
            for wo in 0..wo_n {
                let h0 = (ho * stride) as isize - padding as isize;
                let w0 = (wo * stride) as isize - padding as isize;
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for r in 0..k as isize {
                    let hi = h0 + r;
                    if hi < 0 || hi >= xd.h as isize {
                        continue;
                    }
                    for s in 0..k as isize {
                        let wi = w0 + s;
                        if wi < 0 || wi >= xd.w as isize {
                            continue;
                        }
                        let idx = x_base + hi as usize * xd.w + wi as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[o_base + ho * wo_n + wo] = best;
                argmax[o_base + ho * wo_n + wo] = best_idx as u32;
            }
        }
    }
    (out, argmax, od)
}

/// C = A(m,k) · B(k,n)
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = i * n;
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = p * n;
            for j in 0..n {
                c[c_row + j] += a_ip * b[b_row + j];
            }
        }
    }
    c
}

/// C = A(m,n) · B(k,n)ᵀ  →  (m,k)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let a_row = i * n;
        for p in 0..k {
            let b_row = p * n;
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[a_row + j] * b[b_row + j];
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// C = A(m,k)ᵀ · B(m,n)  →  (k,n)
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let b_row = i * n;
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let c_row = p * n;
            for j in 0..n {
                c[c_row + j] += a_ip * b[b_row + j];
            }
        }
    }
    c
}

/// Softmax along `axis` of a tensor with the given shape.
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (x[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= sum;
            }
        }
    }
    out
}

/// VJP of softmax: dx = y ⊙ (dy − ⟨dy, y⟩ along axis).
pub fn softmax_backward(dy: &[f64], y: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = 0.0;
            for a in 0..axis_len {
                let idx = base + a * inner;
                dot += dy[idx] * y[idx];
            }
            for a in 0..axis_len {
                let idx = base + a * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
