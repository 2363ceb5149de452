//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Ops
//! append a node holding the output value plus whatever the backward
//! rule needs (parent indices, saved activations), and [`Tape::backward`]
//! replays the nodes in reverse, accumulating gradients additively.
//! One tape serves one step: models insert parameters as leaves, run
//! forward, call backward once, and drop the tape.
//!
//! Reductions inside every kernel use the pairwise order from
//! [`crate::tensor`], so forward values are deterministic and coupled
//! models keep their bit-level equivalence guarantees.

use crate::error::{Error, Result};
use crate::tensor::{self, pairwise_dot, pairwise_sum, Precision, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    back: Back,
}

/// Saved state per operation, consumed by the backward sweep.
enum Back {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Matmul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, k: usize, b: Option<usize>, stride: usize, pad: usize },
    Relu { x: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, segments: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormTrain { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
    GlobalAvgPool { x: usize },
    NchwToTokens { x: usize },
    PrependToken { x: usize, tok: usize },
    SelectToken { x: usize, index: usize },
    SliceLast { x: usize, start: usize, len: usize },
    Reshape { x: usize },
    Sum { x: usize },
    SoftmaxCrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

/// Gradients of one backward pass, indexed by tape node. Nodes the loss
/// does not depend on have no entry.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Back::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, back: Back) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    fn precision_of(&self, vars: &[usize], op: &'static str) -> Result<Precision> {
        let p = self.nodes[vars[0]].value.precision();
        for &v in &vars[1..] {
            if self.nodes[v].value.precision() != p {
                return Err(Error::PrecisionMismatch { op });
            }
        }
        Ok(p)
    }

    // ── elementwise and matrix ops ──────────────────────────────────

    /// Element-wise sum; `b` may broadcast over a trailing suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Back::Add { a: a.0, b: b.0 }))
    }

    /// Element-wise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Back::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = tensor::scale(self.value(x), c)?;
        Ok(self.push(out, Back::Scale { x: x.0, c }))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Back::Matmul { a: a.0, b: b.0 }))
    }

    /// Affine map `y = x W^T + b` over the last axis. `x` is
    /// `(..., d_in)`, `w` is `(d_out, d_in)`, `b` is `(d_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut ids = vec![x.0, w.0];
        if let Some(bias) = b {
            ids.push(bias.0);
        }
        let precision = self.precision_of(&ids, "linear")?;
        let xt = self.value(x);
        let wt = self.value(w);
        if wt.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("weight must be 2-D, got {:?}", wt.shape()),
            });
        }
        let (d_out, d_in) = (wt.shape()[0], wt.shape()[1]);
        if xt.shape().last() != Some(&d_in) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("input {:?} does not end in d_in={}", xt.shape(), d_in),
            });
        }
        if let Some(bias) = b {
            let bs = self.value(bias).shape();
            if bs != [d_out] {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    detail: format!("bias shape {:?}, expected [{}]", bs, d_out),
                });
            }
        }
        let rows = xt.numel() / d_in;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|bias| self.value(bias).data().to_vec());
        let mut out = vec![0.0; rows * d_out];
        let mut scratch = Vec::with_capacity(d_in);
        for r in 0..rows {
            let xrow = &xd[r * d_in..(r + 1) * d_in];
            for o in 0..d_out {
                let wrow = &wd[o * d_in..(o + 1) * d_in];
                let mut acc = pairwise_dot(xrow, wrow, &mut scratch);
                if let Some(bias) = &bd {
                    acc += bias[o];
                }
                out[r * d_out + o] = acc;
            }
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::from_op("linear", shape, out, precision)?;
        Ok(self.push(value, Back::Linear { x: x.0, w: w.0, b: b.map(|v| v.0) }))
    }

    // ── convolution ─────────────────────────────────────────────────

    /// 2-D convolution, NCHW layout, square kernel, symmetric zero
    /// padding. `x` is `(B, C_in, H, W)`, `k` is `(C_out, C_in, K, K)`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let mut ids = vec![x.0, k.0];
        if let Some(bias) = b {
            ids.push(bias.0);
        }
        let precision = self.precision_of(&ids, "conv2d")?;
        if stride == 0 {
            return Err(Error::Domain { detail: "conv2d stride must be positive".into() });
        }
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected 4-D input and kernel, got {:?} and {:?}", xs, ks),
            });
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kc_in, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel expects {} input channels, input has {}", kc_in, c_in),
            });
        }
        if kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be square, got {}x{}", kh, kw),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
            });
        }
        if let Some(bias) = b {
            let bs = self.value(bias).shape();
            if bs != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias shape {:?}, expected [{}]", bs, c_out),
                });
            }
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        let bd = b.map(|bias| self.value(bias).data().to_vec());
        let window = c_in * kh * kw;
        let mut scratch = vec![0.0; window];
        let mut out = vec![0.0; batch * c_out * h_out * w_out];
        for bi in 0..batch {
            for co in 0..c_out {
                for ho in 0..h_out {
                    for wo in 0..w_out {
                        // Products gathered channel-major so the window's
                        // midpoint coincides with the channel-concat seam.
                        let mut idx = 0;
                        for ci in 0..c_in {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let hi = (ho * stride + ki) as isize - pad as isize;
                                    let wi = (wo * stride + kj) as isize - pad as isize;
                                    let xv = if hi >= 0 && (hi as usize) < h && wi >= 0 && (wi as usize) < w {
                                        xd[((bi * c_in + ci) * h + hi as usize) * w + wi as usize]
                                    } else {
                                        0.0
                                    };
                                    scratch[idx] = xv * kd[((co * c_in + ci) * kh + ki) * kw + kj];
                                    idx += 1;
                                }
                            }
                        }
                        let mut acc = pairwise_sum(&scratch);
                        if let Some(bias) = &bd {
                            acc += bias[co];
                        }
                        out[((bi * c_out + co) * h_out + ho) * w_out + wo] = acc;
                    }
                }
            }
        }
        let value = Tensor::from_op("conv2d", vec![batch, c_out, h_out, w_out], out, precision)?;
        Ok(self.push(value, Back::Conv2d { x: x.0, k: k.0, b: b.map(|v| v.0), stride, pad }))
    }

    // ── activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::from_op("relu", xt.shape().to_vec(), data, xt.precision())?;
        Ok(self.push(value, Back::Relu { x: x.0 }))
    }

    /// Tanh-form GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::from_op("gelu", xt.shape().to_vec(), data, xt.precision())?;
        Ok(self.push(value, Back::Gelu { x: x.0 }))
    }

    // ── normalization ───────────────────────────────────────────────

    /// Layer norm over the last axis, split into `segments` equal
    /// contiguous pieces each normalized independently. `segments = 1`
    /// is the ordinary layer norm; `segments = 2` normalizes the two
    /// coupled halves separately (the split-norm debugging layout).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, segments: usize) -> Result<Var> {
        let precision = self.precision_of(&[x.0, gamma.0, beta.0], "layer_norm")?;
        let xt = self.value(x);
        let d = *xt.shape().last().ok_or_else(|| Error::ShapeMismatch {
            op: "layer_norm",
            detail: "input has no axes".into(),
        })?;
        if segments == 0 || d % segments != 0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("{} segments do not divide feature dim {}", segments, d),
            });
        }
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma/beta shapes {:?}/{:?}, expected [{}]",
                    self.value(gamma).shape(),
                    self.value(beta).shape(),
                    d
                ),
            });
        }
        let rows = xt.numel() / d;
        let seg = d / segments;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows * segments];
        let mut centered = vec![0.0; seg];
        let mut squares = vec![0.0; seg];
        for r in 0..rows {
            for s in 0..segments {
                let base = r * d + s * seg;
                let slice = &xd[base..base + seg];
                let mean = pairwise_sum(slice) / seg as f64;
                for (i, &v) in slice.iter().enumerate() {
                    centered[i] = v - mean;
                    squares[i] = centered[i] * centered[i];
                }
                let var = pairwise_sum(&squares) / seg as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r * segments + s] = inv;
                for i in 0..seg {
                    let h = centered[i] * inv;
                    xhat[base + i] = h;
                    out[base + i] = gd[s * seg + i] * h + bd[s * seg + i];
                }
            }
        }
        let value = Tensor::from_op("layer_norm", xt.shape().to_vec(), out, precision)?;
        Ok(self.push(value, Back::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, segments, xhat, inv_std }))
    }

    /// Batch norm in training mode: normalizes by batch statistics and
    /// returns the updated running mean/variance (exponential moving
    /// average, unbiased variance in the running estimate).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor)> {
        let precision = self.precision_of(&[x.0, gamma.0, beta.0], "batch_norm")?;
        let (batch, c, h, w) = bn_dims(self.value(x), self.value(gamma), self.value(beta), running_mean, running_var)?;
        let n = batch * h * w;
        if n < 2 {
            return Err(Error::State {
                detail: format!("batch norm needs at least 2 values per channel, got {}", n),
            });
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut new_mean = vec![0.0; c];
        let mut new_var = vec![0.0; c];
        let mut gather = vec![0.0; n];
        for ci in 0..c {
            let mut idx = 0;
            for bi in 0..batch {
                let base = (bi * c + ci) * h * w;
                for s in 0..h * w {
                    gather[idx] = xd[base + s];
                    idx += 1;
                }
            }
            let mean = pairwise_sum(&gather) / n as f64;
            let mut squares = vec![0.0; n];
            for (i, &v) in gather.iter().enumerate() {
                let d = v - mean;
                squares[i] = d * d;
            }
            let var = pairwise_sum(&squares) / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[ci] = inv;
            new_mean[ci] = (1.0 - momentum) * running_mean.data()[ci] + momentum * mean;
            let unbiased = var * n as f64 / (n as f64 - 1.0);
            new_var[ci] = (1.0 - momentum) * running_var.data()[ci] + momentum * unbiased;
            for bi in 0..batch {
                let base = (bi * c + ci) * h * w;
                for s in 0..h * w {
                    let hat = (xd[base + s] - mean) * inv;
                    xhat[base + s] = hat;
                    out[base + s] = gd[ci] * hat + bd[ci];
                }
            }
        }
        let value = Tensor::from_op("batch_norm", self.value(x).shape().to_vec(), out, precision)?;
        let var_out = self.push(value, Back::BatchNormTrain { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std });
        let rm = Tensor::from_op("batch_norm", vec![c], new_mean, running_mean.precision())?;
        let rv = Tensor::from_op("batch_norm", vec![c], new_var, running_var.precision())?;
        Ok((var_out, rm, rv))
    }

    /// Batch norm in eval mode: a fixed per-channel affine map built
    /// from the running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let precision = self.precision_of(&[x.0, gamma.0, beta.0], "batch_norm")?;
        let (batch, c, h, w) = bn_dims(self.value(x), self.value(gamma), self.value(beta), running_mean, running_var)?;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let inv = 1.0 / (running_var.data()[ci] + eps).sqrt();
            inv_std[ci] = inv;
            let mean = running_mean.data()[ci];
            for bi in 0..batch {
                let base = (bi * c + ci) * h * w;
                for s in 0..h * w {
                    let hat = (xd[base + s] - mean) * inv;
                    xhat[base + s] = hat;
                    out[base + s] = gd[ci] * hat + bd[ci];
                }
            }
        }
        let value = Tensor::from_op("batch_norm", self.value(x).shape().to_vec(), out, precision)?;
        Ok(self.push(value, Back::BatchNormEval { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }))
    }

    // ── attention ───────────────────────────────────────────────────

    /// Scaled dot-product attention over `heads` independent slices of
    /// the feature axis. `q`, `k`, `v` are `(B, T, W)` with `W` divisible
    /// by `heads`; tokens attend within their own head only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let precision = self.precision_of(&[q.0, k.0, v.0], "attention")?;
        let qs = self.value(q).shape().to_vec();
        if qs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                detail: format!("expected (B, T, W), got {:?}", qs),
            });
        }
        if self.value(k).shape() != qs || self.value(v).shape() != qs {
            return Err(Error::ShapeMismatch {
                op: "attention",
                detail: "q, k, v must share a shape".into(),
            });
        }
        let (batch, t, w) = (qs[0], qs[1], qs[2]);
        if heads == 0 || w % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                detail: format!("{} heads do not divide width {}", heads, w),
            });
        }
        let d = w / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; batch * t * w];
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut scratch = Vec::with_capacity(d.max(t));
        let mut row = vec![0.0; t];
        for bi in 0..batch {
            for hi in 0..heads {
                let off = hi * d;
                for ti in 0..t {
                    let qrow = &qd[(bi * t + ti) * w + off..(bi * t + ti) * w + off + d];
                    for tj in 0..t {
                        let krow = &kd[(bi * t + tj) * w + off..(bi * t + tj) * w + off + d];
                        row[tj] = pairwise_dot(qrow, krow, &mut scratch) * scale;
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut exps = vec![0.0; t];
                    for tj in 0..t {
                        exps[tj] = (row[tj] - max).exp();
                    }
                    let z = pairwise_sum(&exps);
                    let pbase = ((bi * heads + hi) * t + ti) * t;
                    for tj in 0..t {
                        probs[pbase + tj] = exps[tj] / z;
                    }
                    for j in 0..d {
                        scratch.clear();
                        scratch.extend((0..t).map(|tj| probs[pbase + tj] * vd[(bi * t + tj) * w + off + j]));
                        out[(bi * t + ti) * w + off + j] = pairwise_sum(&scratch);
                    }
                }
            }
        }
        let value = Tensor::from_op("attention", vec![batch, t, w], out, precision)?;
        Ok(self.push(value, Back::Attention { q: q.0, k: k.0, v: v.0, heads, probs }))
    }

    // ── pooling and layout ──────────────────────────────────────────

    /// Mean over the spatial axes: `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let xs = xt.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                detail: format!("expected (B, C, H, W), got {:?}", xs),
            });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let xd = xt.data();
        let mut out = vec![0.0; batch * c];
        for bi in 0..batch {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                out[bi * c + ci] = pairwise_sum(&xd[base..base + hw]) / hw as f64;
            }
        }
        let value = Tensor::from_op("global_avg_pool", vec![batch, c], out, xt.precision())?;
        Ok(self.push(value, Back::GlobalAvgPool { x: x.0 }))
    }

    /// Flatten spatial positions into tokens: `(B, C, H, W) -> (B, H*W, C)`.
    pub fn nchw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let xs = xt.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "nchw_to_tokens",
                detail: format!("expected (B, C, H, W), got {:?}", xs),
            });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let xd = xt.data();
        let mut out = vec![0.0; batch * hw * c];
        for bi in 0..batch {
            for ci in 0..c {
                for s in 0..hw {
                    out[(bi * hw + s) * c + ci] = xd[(bi * c + ci) * hw + s];
                }
            }
        }
        let value = Tensor::from_op("nchw_to_tokens", vec![batch, hw, c], out, xt.precision())?;
        Ok(self.push(value, Back::NchwToTokens { x: x.0 }))
    }

    /// Prepend a learned token to every sequence:
    /// `(B, T, W) + (W) -> (B, T+1, W)` with the token at position 0.
    pub fn prepend_token(&mut self, x: Var, tok: Var) -> Result<Var> {
        let precision = self.precision_of(&[x.0, tok.0], "prepend_token")?;
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "prepend_token",
                detail: format!("expected (B, T, W), got {:?}", xs),
            });
        }
        let (batch, t, w) = (xs[0], xs[1], xs[2]);
        if self.value(tok).shape() != [w] {
            return Err(Error::ShapeMismatch {
                op: "prepend_token",
                detail: format!("token shape {:?}, expected [{}]", self.value(tok).shape(), w),
            });
        }
        let xd = self.value(x).data();
        let td = self.value(tok).data();
        let mut out = vec![0.0; batch * (t + 1) * w];
        for bi in 0..batch {
            out[bi * (t + 1) * w..bi * (t + 1) * w + w].copy_from_slice(td);
            out[bi * (t + 1) * w + w..(bi + 1) * (t + 1) * w].copy_from_slice(&xd[bi * t * w..(bi + 1) * t * w]);
        }
        let value = Tensor::from_op("prepend_token", vec![batch, t + 1, w], out, precision)?;
        Ok(self.push(value, Back::PrependToken { x: x.0, tok: tok.0 }))
    }

    /// Select one token from every sequence: `(B, T, W) -> (B, W)`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let xt = self.value(x);
        let xs = xt.shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "select_token",
                detail: format!("expected (B, T, W), got {:?}", xs),
            });
        }
        let (batch, t, w) = (xs[0], xs[1], xs[2]);
        if index >= t {
            return Err(Error::ShapeMismatch {
                op: "select_token",
                detail: format!("token index {} out of range for {} tokens", index, t),
            });
        }
        let xd = xt.data();
        let mut out = vec![0.0; batch * w];
        for bi in 0..batch {
            out[bi * w..(bi + 1) * w].copy_from_slice(&xd[(bi * t + index) * w..(bi * t + index) * w + w]);
        }
        let value = Tensor::from_op("select_token", vec![batch, w], out, xt.precision())?;
        Ok(self.push(value, Back::SelectToken { x: x.0, index }))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let d = *xt.shape().last().ok_or_else(|| Error::ShapeMismatch {
            op: "slice_last",
            detail: "input has no axes".into(),
        })?;
        if start + len > d {
            return Err(Error::ShapeMismatch {
                op: "slice_last",
                detail: format!("slice {}..{} exceeds last dim {}", start, start + len, d),
            });
        }
        let rows = xt.numel() / d;
        let xd = xt.data();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_op("slice_last", shape, out, xt.precision())?;
        Ok(self.push(value, Back::SliceLast { x: x.0, start, len }))
    }

    /// Reinterpret the shape; element count must be unchanged.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xt = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != xt.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?} changes element count", xt.shape(), shape),
            });
        }
        let value = Tensor::from_op("reshape", shape, xt.data().to_vec(), xt.precision())?;
        Ok(self.push(value, Back::Reshape { x: x.0 }))
    }

    // ── reductions and loss ─────────────────────────────────────────

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let total = pairwise_sum(xt.data());
        let value = Tensor::from_op("sum", vec![], vec![total], xt.precision())?;
        Ok(self.push(value, Back::Sum { x: x.0 }))
    }

    /// Mean softmax cross-entropy over a batch of logits `(B, C)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let ls = lt.shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("expected (B, C) logits, got {:?}", ls),
            });
        }
        let (batch, classes) = (ls[0], ls[1]);
        if targets.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{} targets for batch of {}", targets.len(), batch),
            });
        }
        if let Some(bad) = targets.iter().find(|&&y| y >= classes) {
            return Err(Error::Domain {
                detail: format!("target class {} out of range 0..{}", bad, classes),
            });
        }
        let ld = lt.data();
        let mut probs = vec![0.0; batch * classes];
        let mut losses = vec![0.0; batch];
        let mut exps = vec![0.0; classes];
        for bi in 0..batch {
            let row = &ld[bi * classes..(bi + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (c, &l) in row.iter().enumerate() {
                exps[c] = (l - max).exp();
            }
            let z = pairwise_sum(&exps);
            for c in 0..classes {
                probs[bi * classes + c] = exps[c] / z;
            }
            losses[bi] = z.ln() - (row[targets[bi]] - max);
        }
        let loss = pairwise_sum(&losses) / batch as f64;
        let value = Tensor::from_op("softmax_cross_entropy", vec![], vec![loss], lt.precision())?;
        Ok(self.push(
            value,
            Back::SoftmaxCrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape: a second
    /// call is a state error. Gradients accumulate additively, so a
    /// node feeding several consumers receives the sum of their
    /// contributions.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Add the contribution of node `idx` (with output gradient `g`)
    /// into its parents' gradient buffers.
    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ensure = |grads: &mut [Option<Vec<f64>>], node: usize, len: usize| {
            if grads[node].is_none() {
                grads[node] = Some(vec![0.0; len]);
            }
        };
        match &self.nodes[idx].back {
            Back::Leaf => {}
            Back::Add { a, b } => {
                let an = self.nodes[*a].value.numel();
                let bn = self.nodes[*b].value.numel();
                ensure(grads, *a, an);
                ensure(grads, *b, bn);
                {
                    let ga = grads[*a].as_mut().unwrap();
                    for i in 0..an {
                        ga[i] += g[i];
                    }
                }
                let gb = grads[*b].as_mut().unwrap();
                if bn == an {
                    for i in 0..bn {
                        gb[i] += g[i];
                    }
                } else {
                    // b was broadcast over leading axes: reduce over them.
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % bn] += gv;
                    }
                }
            }
            Back::Mul { a, b } => {
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                ensure(grads, *a, ad.len());
                ensure(grads, *b, bd.len());
                {
                    let ga = grads[*a].as_mut().unwrap();
                    for i in 0..ad.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                let gb = grads[*b].as_mut().unwrap();
                for i in 0..bd.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
            Back::Scale { x, c } => {
                let n = self.nodes[*x].value.numel();
                ensure(grads, *x, n);
                let gx = grads[*x].as_mut().unwrap();
                for i in 0..n {
                    gx[i] += g[i] * c;
                }
            }
            Back::Matmul { a, b } => {
                let at = &self.nodes[*a].value;
                let bt = &self.nodes[*b].value;
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[1];
                ensure(grads, *a, m * k);
                ensure(grads, *b, k * n);
                {
                    let ga = grads[*a].as_mut().unwrap();
                    let bd = bt.data();
                    for i in 0..m {
                        for t in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[t * n + j];
                            }
                            ga[i * k + t] += acc;
                        }
                    }
                }
                let gb = grads[*b].as_mut().unwrap();
                let ad = at.data();
                for t in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += ad[i * k + t] * g[i * n + j];
                        }
                        gb[t * n + j] += acc;
                    }
                }
            }
            Back::Linear { x, w, b } => {
                let xt = &self.nodes[*x].value;
                let wt = &self.nodes[*w].value;
                let (d_out, d_in) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.numel() / d_in;
                let xd = xt.data();
                let wd = wt.data();
                ensure(grads, *x, rows * d_in);
                ensure(grads, *w, d_out * d_in);
                {
                    let gx = grads[*x].as_mut().unwrap();
                    for r in 0..rows {
                        for i in 0..d_in {
                            let mut acc = 0.0;
                            for o in 0..d_out {
                                acc += g[r * d_out + o] * wd[o * d_in + i];
                            }
                            gx[r * d_in + i] += acc;
                        }
                    }
                }
                {
                    let gw = grads[*w].as_mut().unwrap();
                    for o in 0..d_out {
                        for i in 0..d_in {
                            let mut acc = 0.0;
                            for r in 0..rows {
                                acc += g[r * d_out + o] * xd[r * d_in + i];
                            }
                            gw[o * d_in + i] += acc;
                        }
                    }
                }
                if let Some(bv) = b {
                    ensure(grads, *bv, d_out);
                    let gb = grads[*bv].as_mut().unwrap();
                    for r in 0..rows {
                        for o in 0..d_out {
                            gb[o] += g[r * d_out + o];
                        }
                    }
                }
            }
            Back::Conv2d { x, k, b, stride, pad } => {
                let xt = &self.nodes[*x].value;
                let kt = &self.nodes[*k].value;
                let xs = xt.shape();
                let ks = kt.shape();
                let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (c_out, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let h_out = (h + 2 * pad - kh) / stride + 1;
                let w_out = (w + 2 * pad - kw) / stride + 1;
                let xd = xt.data();
                let kd = kt.data();
                ensure(grads, *x, xd.len());
                ensure(grads, *k, kd.len());
                if let Some(bv) = b {
                    ensure(grads, *bv, c_out);
                }
                for bi in 0..batch {
                    for co in 0..c_out {
                        for ho in 0..h_out {
                            for wo in 0..w_out {
                                let gv = g[((bi * c_out + co) * h_out + ho) * w_out + wo];
                                if let Some(bv) = b {
                                    grads[*bv].as_mut().unwrap()[co] += gv;
                                }
                                for ci in 0..c_in {
                                    for ki in 0..kh {
                                        for kj in 0..kw {
                                            let hi = (ho * stride + ki) as isize - *pad as isize;
                                            let wi = (wo * stride + kj) as isize - *pad as isize;
                                            if hi < 0 || hi as usize >= h || wi < 0 || wi as usize >= w {
                                                continue;
                                            }
                                            let xi = ((bi * c_in + ci) * h + hi as usize) * w + wi as usize;
                                            let kidx = ((co * c_in + ci) * kh + ki) * kw + kj;
                                            grads[*x].as_mut().unwrap()[xi] += gv * kd[kidx];
                                            grads[*k].as_mut().unwrap()[kidx] += gv * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Back::Relu { x } => {
                let xd = self.nodes[*x].value.data();
                ensure(grads, *x, xd.len());
                let gx = grads[*x].as_mut().unwrap();
                for i in 0..xd.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Back::Gelu { x } => {
                let xd = self.nodes[*x].value.data();
                ensure(grads, *x, xd.len());
                let gx = grads[*x].as_mut().unwrap();
                for i in 0..xd.len() {
                    gx[i] += g[i] * gelu_grad(xd[i]);
                }
            }
            Back::LayerNorm { x, gamma, beta, segments, xhat, inv_std } => {
                let gd = self.nodes[*gamma].value.data();
                let d = gd.len();
                let seg = d / segments;
                let rows = xhat.len() / d;
                ensure(grads, *x, rows * d);
                ensure(grads, *gamma, d);
                ensure(grads, *beta, d);
                for r in 0..rows {
                    for s in 0..*segments {
                        let base = r * d + s * seg;
                        let inv = inv_std[r * segments + s];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..seg {
                            let dxhat = g[base + i] * gd[s * seg + i];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat[base + i];
                        }
                        let m1 = sum_dxhat / seg as f64;
                        let m2 = sum_dxhat_xhat / seg as f64;
                        let gx = grads[*x].as_mut().unwrap();
                        for i in 0..seg {
                            let dxhat = g[base + i] * gd[s * seg + i];
                            gx[base + i] += inv * (dxhat - m1 - xhat[base + i] * m2);
                        }
                    }
                }
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        dgamma[j] += g[r * d + j] * xhat[r * d + j];
                        dbeta[j] += g[r * d + j];
                    }
                }
                let gg = grads[*gamma].as_mut().unwrap();
                for j in 0..d {
                    gg[j] += dgamma[j];
                }
                let gb = grads[*beta].as_mut().unwrap();
                for j in 0..d {
                    gb[j] += dbeta[j];
                }
            }
            Back::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let n = (batch * h * w) as f64;
                let gd = self.nodes[*gamma].value.data();
                ensure(grads, *x, xhat.len());
                ensure(grads, *gamma, c);
                ensure(grads, *beta, c);
                for ci in 0..c {
                    let inv = inv_std[ci];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    for bi in 0..batch {
                        let base = (bi * c + ci) * h * w;
                        for s in 0..h * w {
                            let gv = g[base + s];
                            let dxhat = gv * gd[ci];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat[base + s];
                            sum_g += gv;
                            sum_g_xhat += gv * xhat[base + s];
                        }
                    }
                    let m1 = sum_dxhat / n;
                    let m2 = sum_dxhat_xhat / n;
                    {
                        let gx = grads[*x].as_mut().unwrap();
                        for bi in 0..batch {
                            let base = (bi * c + ci) * h * w;
                            for s in 0..h * w {
                                let dxhat = g[base + s] * gd[ci];
                                gx[base + s] += inv * (dxhat - m1 - xhat[base + s] * m2);
                            }
                        }
                    }
                    grads[*gamma].as_mut().unwrap()[ci] += sum_g_xhat;
                    grads[*beta].as_mut().unwrap()[ci] += sum_g;
                }
            }
            Back::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let gd = self.nodes[*gamma].value.data();
                ensure(grads, *x, xhat.len());
                ensure(grads, *gamma, c);
                ensure(grads, *beta, c);
                for ci in 0..c {
                    let coeff = gd[ci] * inv_std[ci];
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    {
                        let gx = grads[*x].as_mut().unwrap();
                        for bi in 0..batch {
                            let base = (bi * c + ci) * h * w;
                            for s in 0..h * w {
                                let gv = g[base + s];
                                gx[base + s] += gv * coeff;
                                sum_g += gv;
                                sum_g_xhat += gv * xhat[base + s];
                            }
                        }
                    }
                    grads[*gamma].as_mut().unwrap()[ci] += sum_g_xhat;
                    grads[*beta].as_mut().unwrap()[ci] += sum_g;
                }
            }
            Back::Attention { q, k, v, heads, probs } => {
                let qt = &self.nodes[*q].value;
                let (batch, t, w) = (qt.shape()[0], qt.shape()[1], qt.shape()[2]);
                let d = w / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let qd = qt.data();
                let kd = self.nodes[*k].value.data();
                let vd = self.nodes[*v].value.data();
                ensure(grads, *q, qd.len());
                ensure(grads, *k, kd.len());
                ensure(grads, *v, vd.len());
                let mut dp = vec![0.0; t * t];
                let mut ds = vec![0.0; t * t];
                for bi in 0..batch {
                    for hi in 0..*heads {
                        let off = hi * d;
                        let pbase = (bi * heads + hi) * t * t;
                        // dV and dP.
                        {
                            let gv_buf = grads[*v].as_mut().unwrap();
                            for ti in 0..t {
                                for tj in 0..t {
                                    let p = probs[pbase + ti * t + tj];
                                    let mut acc = 0.0;
                                    for j in 0..d {
                                        let go = g[(bi * t + ti) * w + off + j];
                                        gv_buf[(bi * t + tj) * w + off + j] += p * go;
                                        acc += go * vd[(bi * t + tj) * w + off + j];
                                    }
                                    dp[ti * t + tj] = acc;
                                }
                            }
                        }
                        // Softmax backward per query row.
                        for ti in 0..t {
                            let mut dot = 0.0;
                            for tj in 0..t {
                                dot += probs[pbase + ti * t + tj] * dp[ti * t + tj];
                            }
                            for tj in 0..t {
                                ds[ti * t + tj] = probs[pbase + ti * t + tj] * (dp[ti * t + tj] - dot);
                            }
                        }
                        // dQ and dK through the scaled dot product.
                        {
                            let gq_buf = grads[*q].as_mut().unwrap();
                            for ti in 0..t {
                                for tj in 0..t {
                                    let s = ds[ti * t + tj] * scale;
                                    for j in 0..d {
                                        gq_buf[(bi * t + ti) * w + off + j] += s * kd[(bi * t + tj) * w + off + j];
                                    }
                                }
                            }
                        }
                        let gk_buf = grads[*k].as_mut().unwrap();
                        for ti in 0..t {
                            for tj in 0..t {
                                let s = ds[ti * t + tj] * scale;
                                for j in 0..d {
                                    gk_buf[(bi * t + tj) * w + off + j] += s * qd[(bi * t + ti) * w + off + j];
                                }
                            }
                        }
                    }
                }
            }
            Back::GlobalAvgPool { x } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                ensure(grads, *x, batch * c * hw);
                let gx = grads[*x].as_mut().unwrap();
                for bi in 0..batch {
                    for ci in 0..c {
                        let gv = g[bi * c + ci] / hw as f64;
                        let base = (bi * c + ci) * hw;
                        for s in 0..hw {
                            gx[base + s] += gv;
                        }
                    }
                }
            }
            Back::NchwToTokens { x } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                ensure(grads, *x, batch * c * hw);
                let gx = grads[*x].as_mut().unwrap();
                for bi in 0..batch {
                    for ci in 0..c {
                        for s in 0..hw {
                            gx[(bi * c + ci) * hw + s] += g[(bi * hw + s) * c + ci];
                        }
                    }
                }
            }
            Back::PrependToken { x, tok } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, t, w) = (xs[0], xs[1], xs[2]);
                ensure(grads, *x, batch * t * w);
                ensure(grads, *tok, w);
                {
                    let gt = grads[*tok].as_mut().unwrap();
                    for bi in 0..batch {
                        for j in 0..w {
                            gt[j] += g[bi * (t + 1) * w + j];
                        }
                    }
                }
                let gx = grads[*x].as_mut().unwrap();
                for bi in 0..batch {
                    for ti in 0..t {
                        for j in 0..w {
                            gx[(bi * t + ti) * w + j] += g[(bi * (t + 1) + ti + 1) * w + j];
                        }
                    }
                }
            }
            Back::SelectToken { x, index } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, t, w) = (xs[0], xs[1], xs[2]);
                ensure(grads, *x, batch * t * w);
                let gx = grads[*x].as_mut().unwrap();
                for bi in 0..batch {
                    for j in 0..w {
                        gx[(bi * t + index) * w + j] += g[bi * w + j];
                    }
                }
            }
            Back::SliceLast { x, start, len } => {
                let xt = &self.nodes[*x].value;
                let d = *xt.shape().last().unwrap();
                let rows = xt.numel() / d;
                ensure(grads, *x, rows * d);
                let gx = grads[*x].as_mut().unwrap();
                for r in 0..rows {
                    for i in 0..*len {
                        gx[r * d + start + i] += g[r * len + i];
                    }
                }
            }
            Back::Reshape { x } => {
                let n = self.nodes[*x].value.numel();
                ensure(grads, *x, n);
                let gx = grads[*x].as_mut().unwrap();
                for i in 0..n {
                    gx[i] += g[i];
                }
            }
            Back::Sum { x } => {
                let n = self.nodes[*x].value.numel();
                ensure(grads, *x, n);
                let gx = grads[*x].as_mut().unwrap();
                for gxi in gx.iter_mut() {
                    *gxi += g[0];
                }
            }
            Back::SoftmaxCrossEntropy { logits, targets, probs } => {
                let batch = targets.len();
                let classes = probs.len() / batch;
                ensure(grads, *logits, batch * classes);
                let gl = grads[*logits].as_mut().unwrap();
                let inv_b = 1.0 / batch as f64;
                for bi in 0..batch {
                    for c in 0..classes {
                        let indicator = if c == targets[bi] { 1.0 } else { 0.0 };
                        gl[bi * classes + c] += g[0] * (probs[bi * classes + c] - indicator) * inv_b;
                    }
                }
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn bn_dims(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<(usize, usize, usize, usize)> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            detail: format!("expected (B, C, H, W), got {:?}", xs),
        });
    }
    let c = xs[1];
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!("{} shape {:?}, expected [{}]", name, t.shape(), c),
            });
        }
    }
    Ok((xs[0], c, xs[2], xs[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn t64(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data, Precision::F64).unwrap()
    }

    #[test]
    fn backward_of_weighted_sum_recovers_weights() {
        // loss = sum(w * x) so dloss/dx = w and dloss/dw = x.
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], vec![1.0, 2.0, 3.0]));
        let w = tape.leaf(t64(&[3], vec![0.5, -1.0, 2.0]));
        let prod = tape.mul(x, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.5, -1.0, 2.0]);
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn gradient_of_unused_leaf_is_absent() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], vec![1.0, 2.0]));
        let unused = tape.leaf(t64(&[2], vec![3.0, 4.0]));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1], vec![2.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_from_non_scalar_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn fan_out_gradients_accumulate_additively() {
        // loss = sum(x) + sum(x) so dloss/dx = 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], vec![1.0, 4.0]));
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let both = tape.add(s1, s2).unwrap();
        let grads = tape.backward(both).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_backward_matches_hand_derivation() {
        // loss = sum(A @ B): dA[i,t] = sum_j B[t,j], dB[t,j] = sum_i A[i,t].
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t64(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t64(&[2, 8], vec![0.0; 16]));
        let loss = tape.softmax_cross_entropy(logits, &[3, 5]).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn conv_of_ones_counts_window_size() {
        // 4x4 ones, 3x3 ones kernel, pad 1: center outputs see the full
        // window (9), corners see 4.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 4, 4], Precision::F64));
        let k = tape.leaf(Tensor::ones(&[1, 1, 3, 3], Precision::F64));
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        let yd = tape.value(y).data();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        assert_eq!(yd[0], 4.0); // corner
        assert_eq!(yd[5], 9.0); // interior
    }

    #[test]
    fn attention_head_isolation() {
        // Zeroing head 1's slice of V zeroes exactly that head's output.
        use crate::rng::{rng_from_seed, standard_normal_vec};
        let (b, t, w, heads) = (2, 4, 8, 2);
        let d = w / heads;
        let mut rng = rng_from_seed(17);
        let q = t64(&[b, t, w], standard_normal_vec(&mut rng, b * t * w));
        let k = t64(&[b, t, w], standard_normal_vec(&mut rng, b * t * w));
        let mut vdata = standard_normal_vec(&mut rng, b * t * w);
        let v_full = t64(&[b, t, w], vdata.clone());
        for row in 0..b * t {
            for j in d..w {
                vdata[row * w + j] = 0.0;
            }
        }
        let v_masked = t64(&[b, t, w], vdata);

        let mut tape = Tape::new();
        let (qv, kv) = (tape.leaf(q.clone()), tape.leaf(k.clone()));
        let vv_full = tape.leaf(v_full);
        let vv_masked = tape.leaf(v_masked);
        let out_full = tape.attention(qv, kv, vv_full, heads).unwrap();
        let out_masked = tape.attention(qv, kv, vv_masked, heads).unwrap();
        let of = tape.value(out_full).data();
        let om = tape.value(out_masked).data();
        for row in 0..b * t {
            for j in 0..w {
                if j < d {
                    assert_eq!(of[row * w + j], om[row * w + j], "head 0 must be untouched");
                } else {
                    assert_eq!(om[row * w + j], 0.0, "head 1 output must vanish");
                }
            }
        }
    }

    #[test]
    fn layer_norm_of_constant_rows_is_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 4], vec![3.0; 8]));
        let gamma = tape.leaf(Tensor::ones(&[4], Precision::F64));
        let beta = tape.leaf(t64(&[4], vec![0.5; 4]));
        let y = tape.layer_norm(x, gamma, beta, 1e-6, 1).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_eval_is_affine_per_channel() {
        // In eval mode y = a*x + b per channel, so y(x1) - y(x2) must be
        // exactly a*(x1 - x2).
        let mut tape = Tape::new();
        let gamma = tape.leaf(t64(&[2], vec![2.0, 0.5]));
        let beta = tape.leaf(t64(&[2], vec![1.0, -1.0]));
        let rm = t64(&[2], vec![0.3, -0.2]);
        let rv = t64(&[2], vec![1.5, 0.8]);
        let x1 = tape.leaf(t64(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let x2 = tape.leaf(t64(&[1, 2, 1, 2], vec![0.0, 1.0, 1.0, 2.0]));
        let y1 = tape.batch_norm_eval(x1, gamma, beta, &rm, &rv, 1e-5).unwrap();
        let y2 = tape.batch_norm_eval(x2, gamma, beta, &rm, &rv, 1e-5).unwrap();
        let a0 = 2.0 / (1.5f64 + 1e-5).sqrt();
        let a1 = 0.5 / (0.8f64 + 1e-5).sqrt();
        let d: Vec<f64> = tape
            .value(y1)
            .data()
            .iter()
            .zip(tape.value(y2).data())
            .map(|(p, q)| p - q)
            .collect();
        assert!((d[0] - a0).abs() < 1e-12);
        assert!((d[1] - a0).abs() < 1e-12);
        assert!((d[2] - 2.0 * a1).abs() < 1e-12);
        assert!((d[3] - 2.0 * a1).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_give_bit_identical_forward_and_gradients() {
        use crate::rng::{rng_from_seed, standard_normal_vec};
        let run = || {
            let mut rng = rng_from_seed(23);
            let mut tape = Tape::new();
            let x = tape.leaf(t64(&[4, 6], standard_normal_vec(&mut rng, 24)));
            let w = tape.leaf(t64(&[3, 6], standard_normal_vec(&mut rng, 18)));
            let b = tape.leaf(t64(&[3], standard_normal_vec(&mut rng, 3)));
            let y = tape.linear(x, w, Some(b)).unwrap();
            let act = tape.gelu(y).unwrap();
            let loss = tape.sum(act).unwrap();
            let lv = tape.value(loss).item().unwrap();
            let grads = tape.backward(loss).unwrap();
            (lv, grads.get(w).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn overflow_is_reported_as_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1], vec![1e308]));
        let doubled = tape.scale(x, 10.0);
        assert!(matches!(doubled, Err(Error::NonFinite { .. })));
    }
}
