//! Dense f32 tensors and the handful of forward/backward kernels the
//! segmenter and the rewriting loop need.
//!
//! Every kernel is a pure function of its inputs. Accumulation order inside
//! each kernel is fixed, so identical inputs always give identical buffers.
//! Scalar losses are accumulated in f64.

use crate::error::{Error, Result};

/// Row-major dense tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same buffer, new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0, 0, 0],
            }),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Output extent of a strided, padded sliding window, if positive.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [n, c_in, h, w] = input.dims4("conv2d input")?;
        let [c_out, w_in, kh, kw] = weights.dims4("conv2d weights")?;
        if w_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.shape.clone(),
                right: weights.shape.clone(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (oh, ow) = match (
            conv_output_len(h, kh, stride, padding),
            conv_output_len(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: input.shape.clone(),
                    right: weights.shape.clone(),
                })
            }
        };
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }

    /// Output columns `[lo, hi)` whose tap at kernel column `k` lands inside the input.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        valid_range(self.w, self.ow, k, self.stride, self.padding)
    }

    fn valid_rows(&self, k: usize) -> (usize, usize) {
        valid_range(self.h, self.oh, k, self.stride, self.padding)
    }
}

fn valid_range(extent: usize, out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - padding < extent
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if extent + padding > k {
        ((extent + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation of an NCHW input with OIHW weights plus per-channel bias.
///
/// Each output accumulates `bias`, then taps in (input channel, kernel row,
/// kernel column) order, skipping taps that fall in the zero padding.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weights, stride, padding)?;
    if bias.shape != [g.c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: bias.shape.clone(),
            right: weights.shape.clone(),
        });
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0f32; g.n * g.c_out * plane_out];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + o) * plane_out..][..plane_out];
            dst.fill(bias.data[o]);
            for i in 0..g.c_in {
                let src = &input.data[(n * g.c_in + i) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (row_lo, row_hi) = g.valid_rows(ky);
                    for kx in 0..g.kw {
                        let wv = weights.data[((o * g.c_in + i) * g.kh + ky) * g.kw + kx];
                        let (col_lo, col_hi) = g.valid_cols(kx);
                        if col_lo >= col_hi {
                            continue;
                        }
                        for oy in row_lo..row_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let src_row = &src[iy * g.w..][..g.w];
                            let dst_row = &mut dst[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let ix0 = col_lo + kx - g.padding;
                                let len = col_hi - col_lo;
                                for (d, s) in dst_row[col_lo..col_hi]
                                    .iter_mut()
                                    .zip(&src_row[ix0..ix0 + len])
                                {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in col_lo..col_hi {
                                    dst_row[ox] += wv * src_row[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(g.output_shape(), out)
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

fn check_upstream(g: &ConvGeometry, upstream: &Tensor) -> Result<()> {
    if upstream.shape != g.output_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward upstream",
            left: upstream.shape.clone(),
            right: g.output_shape(),
        });
    }
    Ok(())
}

fn weight_and_bias_grads(
    g: &ConvGeometry,
    input: &Tensor,
    upstream: &Tensor,
) -> (Tensor, Tensor) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gw = vec![0.0f32; g.c_out * g.c_in * g.kh * g.kw];
    let mut gb = vec![0.0f32; g.c_out];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let up = &upstream.data[(n * g.c_out + o) * plane_out..][..plane_out];
            gb[o] += up.iter().map(|&v| v as f64).sum::<f64>() as f32;
            for i in 0..g.c_in {
                let src = &input.data[(n * g.c_in + i) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (row_lo, row_hi) = g.valid_rows(ky);
                    for kx in 0..g.kw {
                        let (col_lo, col_hi) = g.valid_cols(kx);
                        let mut acc = 0.0f32;
                        for oy in row_lo..row_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let src_row = &src[iy * g.w..][..g.w];
                            let up_row = &up[oy * g.ow..][..g.ow];
                            let mut row_acc = 0.0f32;
                            if g.stride == 1 {
                                let ix0 = col_lo + kx - g.padding;
                                let len = col_hi.saturating_sub(col_lo);
                                for (u, s) in up_row[col_lo..col_lo + len]
                                    .iter()
                                    .zip(&src_row[ix0..ix0 + len])
                                {
                                    row_acc += u * s;
                                }
                            } else {
                                for ox in col_lo..col_hi {
                                    row_acc += up_row[ox] * src_row[ox * g.stride + kx - g.padding];
                                }
                            }
                            acc += row_acc;
                        }
                        gw[((o * g.c_in + i) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: vec![g.c_out, g.c_in, g.kh, g.kw],
            data: gw,
        },
        Tensor {
            shape: vec![g.c_out],
            data: gb,
        },
    )
}

/// Full backward pass of [`conv2d_forward`].
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weights, stride, padding)?;
    check_upstream(&g, upstream)?;
    let (gw, gb) = weight_and_bias_grads(&g, input, upstream);

    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gi = vec![0.0f32; input.len()];
    for n in 0..g.n {
        for i in 0..g.c_in {
            let dst = &mut gi[(n * g.c_in + i) * plane_in..][..plane_in];
            for o in 0..g.c_out {
                let up = &upstream.data[(n * g.c_out + o) * plane_out..][..plane_out];
                for ky in 0..g.kh {
                    let (row_lo, row_hi) = g.valid_rows(ky);
                    for kx in 0..g.kw {
                        let wv = weights.data[((o * g.c_in + i) * g.kh + ky) * g.kw + kx];
                        let (col_lo, col_hi) = g.valid_cols(kx);
                        for oy in row_lo..row_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let up_row = &up[oy * g.ow..][..g.ow];
                            let dst_row = &mut dst[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let ix0 = col_lo + kx - g.padding;
                                let len = col_hi.saturating_sub(col_lo);
                                for (d, u) in dst_row[ix0..ix0 + len]
                                    .iter_mut()
                                    .zip(&up_row[col_lo..col_lo + len])
                                {
                                    *d += wv * u;
                                }
                            } else {
                                for ox in col_lo..col_hi {
                                    dst_row[ox * g.stride + kx - g.padding] += wv * up_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor {
            shape: input.shape.clone(),
            data: gi,
        },
        weights: gw,
        bias: gb,
    })
}

/// Weight and bias gradients only; skips the input gradient.
pub fn conv2d_backward_params(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input, weights, stride, padding)?;
    check_upstream(&g, upstream)?;
    Ok(weight_and_bias_grads(&g, input, upstream))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gates `upstream` by `input > 0`.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", input, upstream)?;
    Ok(Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Replicates every pixel of an NCHW tensor into a `factor`×`factor` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let [n, c, h, w] = input.dims4("upsample_nearest")?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for (plane, src) in out.chunks_exact_mut(oh * ow).zip(input.data.chunks_exact(h * w)) {
        for y in 0..oh {
            let src_row = &src[(y / factor) * w..][..w];
            let dst_row = &mut plane[y * ow..][..ow];
            for (x, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[x / factor];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Sums `upstream` over each replication block.
pub fn upsample_nearest_backward(upstream: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let [n, c, oh, ow] = upstream.dims4("upsample_nearest_backward")?;
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::invalid(format!(
            "upstream spatial dims {oh}x{ow} not divisible by factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(upstream.clone());
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![0.0f32; n * c * h * w];
    for (plane, src) in out.chunks_exact_mut(h * w).zip(upstream.data.chunks_exact(oh * ow)) {
        for y in 0..oh {
            let src_row = &src[y * ow..][..ow];
            let dst_row = &mut plane[(y / factor) * w..][..w];
            for (x, &v) in src_row.iter().enumerate() {
                dst_row[x / factor] += v;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Mean absolute error over the unmasked elements and its (sub)gradient.
///
/// A mask, when given, must match a trailing suffix of `pred`'s shape and
/// is broadcast over the leading dimensions; nonzero entries select.
pub fn l1_loss(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<(f64, Tensor)> {
    same_shape("l1_loss", pred, target)?;
    let mask_data = match mask {
        Some(m) => {
            let suffix = &pred.shape[pred.shape.len().saturating_sub(m.shape.len())..];
            if m.shape.len() > pred.shape.len() || suffix != m.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "l1_loss mask",
                    left: pred.shape.clone(),
                    right: m.shape.clone(),
                });
            }
            Some(m.data.as_slice())
        }
        None => None,
    };
    let selected = |idx: usize| match mask_data {
        Some(m) => m[idx % m.len()] != 0.0,
        None => true,
    };
    let count = (0..pred.len()).filter(|&i| selected(i)).count();
    if count == 0 {
        return Err(Error::invalid("l1_loss mask selects no elements"));
    }
    let inv = 1.0 / count as f32;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; pred.len()];
    for (idx, ((&p, &t), g)) in pred.data.iter().zip(&target.data).zip(grad.iter_mut()).enumerate() {
        if !selected(idx) {
            continue;
        }
        let diff = p - t;
        total += diff.abs() as f64;
        *g = if diff > 0.0 {
            inv
        } else if diff < 0.0 {
            -inv
        } else {
            0.0
        };
    }
    Ok((
        total / count as f64,
        Tensor {
            shape: pred.shape.clone(),
            data: grad,
        },
    ))
}

/// Channel-wise softmax of NCHW logits.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = logits.dims4("softmax_channels")?;
    let plane = h * w;
    let mut out = vec![0.0f32; logits.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let max = (0..c)
                .map(|k| logits.data[base + k * plane + p])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for k in 0..c {
                denom += ((logits.data[base + k * plane + p] - max) as f64).exp();
            }
            for k in 0..c {
                let e = ((logits.data[base + k * plane + p] - max) as f64).exp();
                out[base + k * plane + p] = (e / denom) as f32;
            }
        }
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Mean pixelwise cross-entropy of NCHW logits against per-pixel labels
/// laid out as N×H×W, with its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    softmax_cross_entropy_weighted(logits, labels, None)
}

/// Cross-entropy with optional per-class weights; the loss is normalized by
/// the total weight of all pixels.
pub fn softmax_cross_entropy_weighted(
    logits: &Tensor,
    labels: &[u8],
    class_weights: Option<&[f32]>,
) -> Result<(f64, Tensor)> {
    let [n, c, h, w] = logits.dims4("softmax_cross_entropy")?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy labels",
            left: logits.shape.clone(),
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    if let Some(cw) = class_weights {
        if cw.len() != c {
            return Err(Error::invalid(format!(
                "{} class weights for {c} classes",
                cw.len()
            )));
        }
    }
    let weight_of = |l: u8| class_weights.map_or(1.0, |cw| cw[l as usize]) as f64;
    let total_weight: f64 = labels.iter().map(|&l| weight_of(l)).sum();
    if total_weight <= 0.0 {
        return Err(Error::invalid("class weights sum to zero"));
    }
    let probs = softmax_channels(logits)?;
    let mut loss = 0.0f64;
    let mut grad = probs.data.clone();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let label = labels[b * plane + p];
            let wt = weight_of(label);
            let max = (0..c)
                .map(|k| logits.data[base + k * plane + p])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = (0..c)
                .map(|k| (logits.data[base + k * plane + p] as f64 - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            loss += wt * (lse - logits.data[base + label as usize * plane + p] as f64);
            for k in 0..c {
                let idx = base + k * plane + p;
                let onehot = if k == label as usize { 1.0 } else { 0.0 };
                grad[idx] = ((probs.data[idx] as f64 - onehot) * wt / total_weight) as f32;
            }
        }
    }
    Ok((
        loss / total_weight,
        Tensor {
            shape: logits.shape.clone(),
            data: grad,
        },
    ))
}

/// `params - lr * grads`.
pub fn sgd_step(params: &Tensor, grads: &Tensor, lr: f32) -> Result<Tensor> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut Tensor, grads: &Tensor, lr: f32) -> Result<()> {
    same_shape("sgd_step", params, grads)?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    for (p, g) in params.data.iter_mut().zip(&grads.data) {
        *p -= lr * g;
    }
    Ok(())
}
