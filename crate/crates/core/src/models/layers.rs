//! Layer building blocks shared by the architectures.

use super::ctx::{Ctx, Init, Mode};
use super::{AttnRecord, ModelError, Param, ParamRole, TokenLayout};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;
/// Additive logit for token pairs split by a shifted-window boundary.
pub(crate) const MASK_LOGIT: f64 = -100.0;

type R = Result<Var, ModelError>;

fn dims<S: Scalar>(ctx: &Ctx<'_, '_, S>, x: Var) -> Vec<usize> {
    ctx.g.shape(x).to_vec()
}

pub(crate) fn conv<S: Scalar>(
    ctx: &mut Ctx<'_, '_, S>,
    x: Var,
    name: &str,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bias: bool,
) -> R {
    let c_in = dims(ctx, x)[1];
    let w = ctx.param(
        &format!("{name}.weight"),
        &[c_out, c_in, k, k],
        Init::KaimingUniform { fan_in: c_in * k * k },
        ParamRole::Weight,
    )?;
    let b = if bias {
        Some(ctx.param(&format!("{name}.bias"), &[c_out], Init::Zeros, ParamRole::Bias)?)
    } else {
        None
    };
    ctx.layer(format!("{name}: conv{k}x{k}/{stride} {c_in}->{c_out}"));
    Ok(ctx.g.conv2d(x, w, b, stride, pad)?)
}

pub(crate) fn depthwise<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str, k: usize) -> R {
    let c = dims(ctx, x)[1];
    let w = ctx.param(
        &format!("{name}.weight"),
        &[c, 1, k, k],
        Init::KaimingUniform { fan_in: k * k },
        ParamRole::Weight,
    )?;
    let b = ctx.param(&format!("{name}.bias"), &[c], Init::Zeros, ParamRole::Bias)?;
    ctx.layer(format!("{name}: depthwise{k}x{k} {c}"));
    Ok(ctx.g.depthwise_conv2d(x, w, Some(b), 1, k / 2)?)
}

pub(crate) fn pointwise<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str, c_out: usize) -> R {
    let c_in = dims(ctx, x)[1];
    let w = ctx.param(
        &format!("{name}.weight"),
        &[c_out, c_in, 1, 1],
        Init::KaimingUniform { fan_in: c_in },
        ParamRole::Weight,
    )?;
    let b = ctx.param(&format!("{name}.bias"), &[c_out], Init::Zeros, ParamRole::Bias)?;
    ctx.layer(format!("{name}: pointwise {c_in}->{c_out}"));
    Ok(ctx.g.pointwise_conv2d(x, w, Some(b))?)
}

/// `x · W + b` over the last axis.
pub(crate) fn linear<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str, out: usize) -> R {
    linear_with(ctx, x, name, out, true)
}

pub(crate) fn linear_with<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str, out: usize, bias: bool) -> R {
    let d_in = *dims(ctx, x).last().expect("rank >= 1");
    let w = ctx.param(
        &format!("{name}.weight"),
        &[d_in, out],
        Init::KaimingUniform { fan_in: d_in },
        ParamRole::Weight,
    )?;
    ctx.layer(format!("{name}: linear {d_in}->{out}"));
    if !bias {
        return Ok(ctx.g.matmul(x, w)?);
    }
    let b = ctx.param(&format!("{name}.bias"), &[out], Init::Zeros, ParamRole::Bias)?;
    let y = ctx.g.matmul(x, w)?;
    Ok(ctx.g.add(y, b)?)
}

/// Query, key and value projections. The key projection has no bias: it
/// would shift every score in a row equally, which softmax ignores.
fn qkv<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str, d: usize) -> Result<(Var, Var, Var), ModelError> {
    let q = linear(ctx, x, &format!("{name}.q"), d)?;
    let k = linear_with(ctx, x, &format!("{name}.k"), d, false)?;
    let v = linear(ctx, x, &format!("{name}.v"), d)?;
    Ok((q, k, v))
}

/// Batch norm with stored statistics (running mean 0, variance 1 unless
/// loaded otherwise); only the affine part trains.
pub(crate) fn batch_norm<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str) -> R {
    let c = dims(ctx, x)[1];
    let gamma = ctx.param(&format!("{name}.gamma"), &[c], Init::Ones, ParamRole::Norm)?;
    let beta = ctx.param(&format!("{name}.beta"), &[c], Init::Zeros, ParamRole::Norm)?;
    let mean = ctx.param(&format!("{name}.running_mean"), &[c], Init::Zeros, ParamRole::Buffer)?;
    let var = ctx.param(&format!("{name}.running_var"), &[c], Init::Ones, ParamRole::Buffer)?;
    ctx.layer(format!("{name}: batchnorm {c}"));
    Ok(ctx.g.batch_norm(x, gamma, beta, mean, var, NORM_EPS)?)
}

pub(crate) fn layer_norm<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str) -> R {
    let n = *dims(ctx, x).last().expect("rank >= 1");
    let gamma = ctx.param(&format!("{name}.gamma"), &[n], Init::Ones, ParamRole::Norm)?;
    let beta = ctx.param(&format!("{name}.beta"), &[n], Init::Zeros, ParamRole::Norm)?;
    ctx.layer(format!("{name}: layernorm {n}"));
    Ok(ctx.g.layer_norm(x, gamma, beta, NORM_EPS)?)
}

/// Layer norm over the channel axis of an NCHW tensor.
pub(crate) fn channel_norm<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str) -> R {
    let nhwc = ctx.g.transpose(x, &[0, 2, 3, 1])?;
    let y = layer_norm(ctx, nhwc, name)?;
    Ok(ctx.g.transpose(y, &[0, 3, 1, 2])?)
}

/// `softmax(QKᵀ/√d_k + bias) V` for `[.., n, d_k]` operands; returns the
/// output and the attention weights. `bias` must broadcast over the leading
/// axes of the score tensor.
pub fn scaled_dot_attention<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
) -> Result<(Var, Var), TensorError> {
    let qs = g.shape(q).to_vec();
    let r = qs.len();
    if r < 2 || g.shape(k) != qs.as_slice() || g.shape(v) != qs.as_slice() {
        return Err(crate::tensor::shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", qs, g.shape(k), g.shape(v)),
        ));
    }
    let dk = qs[r - 1];
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    let kt = g.transpose(k, &perm)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(b) = bias {
        scores = g.add(scores, b)?;
    }
    let weights = g.softmax(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Splits `[B, n, D]` into heads `[B, h, n, D/h]`.
fn split_heads<S: Scalar>(g: &mut Graph<S>, x: Var, heads: usize) -> R {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let y = g.reshape(x, &[b, n, heads, d / heads])?;
    Ok(g.transpose(y, &[0, 2, 1, 3])?)
}

fn merge_heads<S: Scalar>(g: &mut Graph<S>, x: Var) -> R {
    let s = g.shape(x).to_vec();
    let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
    let y = g.transpose(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(y, &[b, n, h * d])?)
}

/// Multi-head self-attention over `[B, n, D]` tokens.
pub(crate) fn self_attention<S: Scalar>(
    ctx: &mut Ctx<'_, '_, S>,
    x: Var,
    name: &str,
    heads: usize,
    layout: TokenLayout,
    bias: Option<Var>,
) -> R {
    let d = dims(ctx, x)[2];
    let (q, k, v) = qkv(ctx, x, name, d)?;
    let q = split_heads(ctx.g, q, heads)?;
    let k = split_heads(ctx.g, k, heads)?;
    let v = split_heads(ctx.g, v, heads)?;
    let (o, weights) = scaled_dot_attention(ctx.g, q, k, v, bias)?;
    ctx.attention.push(AttnRecord {
        block: name.to_string(),
        weights,
        layout,
    });
    let o = merge_heads(ctx.g, o)?;
    linear(ctx, o, &format!("{name}.proj"), d)
}

pub(crate) fn mlp<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str, hidden: usize) -> R {
    let d = *dims(ctx, x).last().expect("rank >= 1");
    let h = linear(ctx, x, &format!("{name}.fc1"), hidden)?;
    let h = ctx.g.gelu(h)?;
    linear(ctx, h, &format!("{name}.fc2"), d)
}

/// Pre-norm encoder block on `[B, n, D]` tokens laid out on a grid.
pub(crate) fn encoder_block<S: Scalar>(
    ctx: &mut Ctx<'_, '_, S>,
    x: Var,
    name: &str,
    heads: usize,
    mlp_ratio: usize,
    grid: (usize, usize),
) -> R {
    let d = dims(ctx, x)[2];
    let h = layer_norm(ctx, x, &format!("{name}.norm1"))?;
    let layout = TokenLayout::Grid { h: grid.0, w: grid.1 };
    let h = self_attention(ctx, h, &format!("{name}.attn"), heads, layout, None)?;
    let x = ctx.g.add(x, h)?;
    let h = layer_norm(ctx, x, &format!("{name}.norm2"))?;
    let h = mlp(ctx, h, &format!("{name}.mlp"), d * mlp_ratio)?;
    Ok(ctx.g.add(x, h)?)
}

/// Region labels of the shifted grid: three bands per axis (the usual
/// shifted-window partition), combined row-major.
fn shift_regions(hgt: usize, wid: usize, window: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut out = vec![0; hgt * wid];
    for y in 0..hgt {
        for x in 0..wid {
            out[y * wid + x] = band(y, hgt) * 3 + band(x, wid);
        }
    }
    out
}

/// Additive mask `[nW, heads, n, n]` for shifted windows: `MASK_LOGIT`
/// between tokens whose pre-shift positions fall in different regions.
pub(crate) fn shift_mask<S: Scalar>(hgt: usize, wid: usize, window: usize, shift: usize, heads: usize) -> Tensor<S> {
    let regions = shift_regions(hgt, wid, window, shift);
    let (wy, wx) = (hgt / window, wid / window);
    let n = window * window;
    let mut data = Vec::with_capacity(wy * wx * heads * n * n);
    for by in 0..wy {
        for bx in 0..wx {
            let region = |t: usize| regions[(by * window + t / window) * wid + bx * window + t % window];
            let block: Vec<S> = (0..n * n)
                .map(|ij| {
                    if region(ij / n) == region(ij % n) {
                        S::zero()
                    } else {
                        S::narrow(MASK_LOGIT)
                    }
                })
                .collect();
            for _ in 0..heads {
                data.extend_from_slice(&block);
            }
        }
    }
    Tensor::new(vec![wy * wx, heads, n, n], data).expect("mask shape")
}

/// Window attention over NHWC tokens `[B, H, W, C]`. With `shift > 0` the
/// grid is rolled by `-shift` on both axes before partitioning and rolled
/// back afterwards; pairs that were not adjacent before the roll are masked.
pub(crate) fn window_attention<S: Scalar>(
    ctx: &mut Ctx<'_, '_, S>,
    x: Var,
    name: &str,
    heads: usize,
    window: usize,
    shift: usize,
) -> R {
    let s = dims(ctx, x);
    let (b, hgt, wid, c) = (s[0], s[1], s[2], s[3]);
    if hgt % window != 0 || wid % window != 0 || shift >= window {
        return Err(ModelError::Config(format!(
            "{name}: token grid {hgt}x{wid} not divisible by window {window} (shift {shift})"
        )));
    }
    let (wy, wx, n) = (hgt / window, wid / window, window * window);
    let nw = wy * wx;
    let g = &mut *ctx.g;
    let mut t = x;
    if shift > 0 {
        t = g.roll(t, 1, -(shift as isize))?;
        t = g.roll(t, 2, -(shift as isize))?;
    }
    let t = g.reshape(t, &[b, wy, window, wx, window, c])?;
    let t = g.transpose(t, &[0, 1, 3, 2, 4, 5])?;
    let t = g.reshape(t, &[b * nw, n, c])?;

    let (q, k, v) = qkv(ctx, t, name, c)?;
    let q = split_heads(ctx.g, q, heads)?;
    let k = split_heads(ctx.g, k, heads)?;
    let v = split_heads(ctx.g, v, heads)?;
    let bias = ctx.param(&format!("{name}.pos_bias"), &[heads, n, n], Init::TruncNormal, ParamRole::Embedding)?;

    let g = &mut *ctx.g;
    let kt = g.transpose(k, &[0, 1, 3, 2])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / ((c / heads) as f64).sqrt())?;
    let mut scores = g.add(scores, bias)?;
    if shift > 0 {
        let mask = g.constant(shift_mask(hgt, wid, window, shift, heads));
        let s5 = g.reshape(scores, &[b, nw, heads, n, n])?;
        let s5 = g.add(s5, mask)?;
        scores = g.reshape(s5, &[b * nw, heads, n, n])?;
    }
    let weights = g.softmax(scores)?;
    let o = g.matmul(weights, v)?;
    ctx.attention.push(AttnRecord {
        block: name.to_string(),
        weights,
        layout: TokenLayout::Windows {
            h: hgt,
            w: wid,
            window,
            shift,
        },
    });
    let o = merge_heads(ctx.g, o)?;
    let o = linear(ctx, o, &format!("{name}.proj"), c)?;
    let g = &mut *ctx.g;
    let o = g.reshape(o, &[b, wy, wx, window, window, c])?;
    let o = g.transpose(o, &[0, 1, 3, 2, 4, 5])?;
    let mut o = g.reshape(o, &[b, hgt, wid, c])?;
    if shift > 0 {
        o = g.roll(o, 1, shift as isize)?;
        o = g.roll(o, 2, shift as isize)?;
    }
    Ok(o)
}

/// Pre-norm shifted-window block on NHWC tokens.
pub(crate) fn swin_block<S: Scalar>(
    ctx: &mut Ctx<'_, '_, S>,
    x: Var,
    name: &str,
    heads: usize,
    window: usize,
    shift: usize,
    mlp_ratio: usize,
) -> R {
    let c = *dims(ctx, x).last().expect("rank 4");
    let h = layer_norm(ctx, x, &format!("{name}.norm1"))?;
    let h = window_attention(ctx, h, &format!("{name}.attn"), heads, window, shift)?;
    let x = ctx.g.add(x, h)?;
    let h = layer_norm(ctx, x, &format!("{name}.norm2"))?;
    let h = mlp(ctx, h, &format!("{name}.mlp"), c * mlp_ratio)?;
    Ok(ctx.g.add(x, h)?)
}

/// 2×2 patch merging on NHWC tokens: `[B, H, W, C] -> [B, H/2, W/2, 2C]`.
pub(crate) fn patch_merge<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str) -> R {
    let s = dims(ctx, x);
    let (b, hgt, wid, c) = (s[0], s[1], s[2], s[3]);
    let g = &mut *ctx.g;
    let t = g.reshape(x, &[b, hgt / 2, 2, wid / 2, 2, c])?;
    let t = g.transpose(t, &[0, 1, 3, 2, 4, 5])?;
    let t = g.reshape(t, &[b, hgt / 2, wid / 2, 4 * c])?;
    let t = layer_norm(ctx, t, &format!("{name}.norm"))?;
    // reduction without bias, as is customary for merging layers
    let w = ctx.param(
        &format!("{name}.reduction.weight"),
        &[4 * c, 2 * c],
        Init::KaimingUniform { fan_in: 4 * c },
        ParamRole::Weight,
    )?;
    ctx.layer(format!("{name}: merge {c}->{}", 2 * c));
    Ok(ctx.g.matmul(t, w)?)
}

/// Residual block `F(x) + shortcut(x)` with `F = conv-BN-relu-conv-BN`; a
/// 1×1 projection with batch norm replaces the identity shortcut when the
/// width or stride changes.
pub(crate) fn residual_block<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, name: &str, c_out: usize, stride: usize) -> R {
    let c_in = dims(ctx, x)[1];
    let h = conv(ctx, x, &format!("{name}.conv1"), c_out, 3, stride, 1, false)?;
    let h = batch_norm(ctx, h, &format!("{name}.bn1"))?;
    let h = ctx.g.relu(h)?;
    let h = conv(ctx, h, &format!("{name}.conv2"), c_out, 3, 1, 1, false)?;
    let h = batch_norm(ctx, h, &format!("{name}.bn2"))?;
    let shortcut = if c_in != c_out || stride != 1 {
        let p = conv(ctx, x, &format!("{name}.proj"), c_out, 1, stride, 0, false)?;
        batch_norm(ctx, p, &format!("{name}.proj_bn"))?
    } else {
        x
    };
    Ok(ctx.g.add(h, shortcut)?)
}

/// Stand-alone access to individual blocks, for probing their behaviour
/// outside a full architecture. The first call creates parameters
/// (deterministically from `seed`); later calls reuse them, so they can be
/// edited in between through [`params_mut`](Self::params_mut).
#[derive(Debug, Clone)]
pub struct BlockHarness<S> {
    seed: u64,
    params: Vec<Param<S>>,
}

impl<S: Scalar> BlockHarness<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
        }
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    fn run<T>(
        &mut self,
        g: &mut Graph<S>,
        f: impl FnOnce(&mut Ctx<'_, '_, S>) -> Result<T, ModelError>,
    ) -> Result<(T, Vec<AttnRecord>), ModelError> {
        if self.params.is_empty() {
            let mode = Mode::Init {
                rng: crate::seed::rng(self.seed, &[0x626c_6f636b]),
                params: Vec::new(),
            };
            let mut ctx = Ctx::new(g, mode);
            let out = f(&mut ctx)?;
            let attention = std::mem::take(&mut ctx.attention);
            if let Mode::Init { params, .. } = ctx.mode {
                self.params = params;
            }
            Ok((out, attention))
        } else {
            let mode = Mode::Run {
                params: &self.params,
                trainable: true,
            };
            let mut ctx = Ctx::new(g, mode);
            let out = f(&mut ctx)?;
            Ok((out, ctx.attention))
        }
    }

    /// See the residual block used by ResNetLite; `x` is NCHW.
    pub fn residual_block(&mut self, g: &mut Graph<S>, x: Var, c_out: usize, stride: usize) -> R {
        Ok(self.run(g, |ctx| residual_block(ctx, x, "res", c_out, stride))?.0)
    }

    /// Windowed multi-head attention over NHWC tokens, with its weights.
    pub fn window_attention(
        &mut self,
        g: &mut Graph<S>,
        x: Var,
        heads: usize,
        window: usize,
        shift: usize,
    ) -> Result<(Var, Var), ModelError> {
        let (out, att) = self.run(g, |ctx| window_attention(ctx, x, "win", heads, window, shift))?;
        Ok((out, att[0].weights))
    }

    /// Multi-head self-attention over `[B, n, D]` tokens, with its weights.
    pub fn self_attention(&mut self, g: &mut Graph<S>, x: Var, heads: usize) -> Result<(Var, Var), ModelError> {
        let n = g.shape(x)[1];
        let layout = TokenLayout::Grid { h: 1, w: n };
        let (out, att) = self.run(g, |ctx| self_attention(ctx, x, "attn", heads, layout, None))?;
        Ok((out, att[0].weights))
    }

    /// Depthwise `k × k` convolution (same padding) on NCHW input.
    pub fn depthwise(&mut self, g: &mut Graph<S>, x: Var, k: usize) -> R {
        Ok(self.run(g, |ctx| depthwise(ctx, x, "dw", k))?.0)
    }
}
