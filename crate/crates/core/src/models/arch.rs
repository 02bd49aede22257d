//! The seven architectures at toy scale. Each takes `[B, 1, H, W]` and
//! returns `[B, num_classes]` logits, registering its XAI hook on the way.

use super::ctx::{Ctx, Init};
use super::layers::*;
use super::{ModelConfig, ModelError, ModelKind, ParamRole};
use crate::scalar::Scalar;
use crate::tensor::Var;

type R = Result<Var, ModelError>;

pub(crate) fn forward<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, kind: ModelKind, cfg: &ModelConfig, x: Var) -> R {
    match kind {
        ModelKind::BaseCnn => base_cnn(ctx, cfg, x),
        ModelKind::ResNetLite => resnet(ctx, cfg, x),
        ModelKind::VitLite => vit(ctx, cfg, x),
        ModelKind::SwinLite => swin(ctx, cfg, x),
        ModelKind::DenseTransformer => dense_transformer(ctx, cfg, x),
        ModelKind::ConvMixerLite => convmixer(ctx, cfg, x),
        ModelKind::ConvNextLite => convnext(ctx, cfg, x),
    }
}

fn head<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, cfg: &ModelConfig, pooled: Var) -> R {
    linear(ctx, pooled, "head", cfg.num_classes)
}

/// Four `conv3×3 → relu → maxpool2` blocks, then two fully connected layers.
fn base_cnn<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, cfg: &ModelConfig, x: Var) -> R {
    let mut h = x;
    let last = cfg.channels.len() - 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let name = format!("block{}", i + 1);
        h = conv(ctx, h, &format!("{name}.conv"), c, 3, 1, 1, true)?;
        h = ctx.g.relu(h)?;
        if i == last {
            ctx.set_hook(&format!("{name}.relu"), h);
        }
        h = ctx.g.max_pool2d(h, 2, 2)?;
    }
    let h = ctx.g.flatten(h)?;
    let h = linear(ctx, h, "fc1", cfg.hidden)?;
    let h = ctx.g.relu(h)?;
    let h = ctx.g.dropout(h)?;
    linear(ctx, h, "fc2", cfg.num_classes)
}

fn resnet<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, cfg: &ModelConfig, x: Var) -> R {
    let stem = cfg.channels[0];
    let h = conv(ctx, x, "stem.conv", stem, 3, 1, 1, false)?;
    let h = batch_norm(ctx, h, "stem.bn")?;
    let h = ctx.g.relu(h)?;
    let mut h = ctx.g.max_pool2d(h, 2, 2)?;
    for (si, &c) in cfg.channels.iter().enumerate() {
        for bi in 0..cfg.depths[si] {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            h = residual_block(ctx, h, &format!("stage{}.block{}", si + 1, bi + 1), c, stride)?;
        }
    }
    let h = ctx.g.relu(h)?;
    ctx.set_hook("final.relu", h);
    let h = ctx.g.global_avg_pool(h)?;
    head(ctx, cfg, h)
}

/// Conv patch embedding: `[B, 1, H, W] -> ([B, n, D], grid)`.
fn patch_embed<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, x: Var, patch: usize, dim: usize) -> Result<(Var, (usize, usize)), ModelError> {
    let h = conv(ctx, x, "patch_embed", dim, patch, patch, 0, true)?;
    let s = ctx.g.shape(h).to_vec();
    let (b, gh, gw) = (s[0], s[2], s[3]);
    let t = ctx.g.reshape(h, &[b, dim, gh * gw])?;
    let t = ctx.g.transpose(t, &[0, 2, 1])?;
    Ok((t, (gh, gw)))
}

fn add_position<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, t: Var) -> R {
    let s = ctx.g.shape(t).to_vec();
    let pos = ctx.param("pos_embed", &[s[1], s[2]], Init::TruncNormal, ParamRole::Embedding)?;
    ctx.layer(format!("pos_embed: {}x{}", s[1], s[2]));
    Ok(ctx.g.embedding_add(t, pos)?)
}

/// Encoder stack, final norm, hook on the token grid and mean-pool head.
fn encoder_head<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, cfg: &ModelConfig, mut t: Var, grid: (usize, usize)) -> R {
    for i in 0..cfg.depth {
        t = encoder_block(ctx, t, &format!("blocks.{i}"), cfg.heads, cfg.mlp_ratio, grid)?;
    }
    let t = layer_norm(ctx, t, "norm")?;
    let s = ctx.g.shape(t).to_vec();
    let (b, d) = (s[0], s[2]);
    let m = ctx.g.transpose(t, &[0, 2, 1])?;
    let m = ctx.g.reshape(m, &[b, d, grid.0, grid.1])?;
    ctx.set_hook("norm.grid", m);
    let pooled = ctx.g.global_avg_pool(m)?;
    head(ctx, cfg, pooled)
}

fn vit<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, cfg: &ModelConfig, x: Var) -> R {
    let (t, grid) = patch_embed(ctx, x, cfg.patch, cfg.embed_dim)?;
    let t = add_position(ctx, t)?;
    encoder_head(ctx, cfg, t, grid)
}

fn swin<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, cfg: &ModelConfig, x: Var) -> R {
    let h = conv(ctx, x, "patch_embed", cfg.embed_dim, cfg.patch, cfg.patch, 0, true)?;
    let mut t = ctx.g.transpose(h, &[0, 2, 3, 1])?;
    t = layer_norm(ctx, t, "patch_norm")?;
    let stages = cfg.depths.len();
    for (si, &depth) in cfg.depths.iter().enumerate() {
        let heads = cfg.heads << si;
        for bi in 0..depth {
            let shift = if bi % 2 == 1 { cfg.window / 2 } else { 0 };
            let grid = ctx.g.shape(t)[1];
            // a window covering the whole grid has nothing to shift across
            let shift = if grid <= cfg.window { 0 } else { shift };
            t = swin_block(ctx, t, &format!("stage{}.block{}", si + 1, bi + 1), heads, cfg.window, shift, cfg.mlp_ratio)?;
        }
        if si + 1 < stages {
            t = patch_merge(ctx, t, &format!("stage{}.merge", si + 1))?;
        }
    }
    let t = layer_norm(ctx, t, "norm")?;
    let m = ctx.g.transpose(t, &[0, 3, 1, 2])?;
    ctx.set_hook("norm.grid", m);
    let pooled = ctx.g.global_avg_pool(m)?;
    head(ctx, cfg, pooled)
}

/// Densely connected conv stem (each layer sees all earlier feature maps)
/// feeding a transformer encoder over the pooled feature grid.
fn dense_transformer<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, cfg: &ModelConfig, x: Var) -> R {
    let stem = cfg.channels[0];
    let growth = cfg.channels.get(1).copied().unwrap_or(stem);
    let h = conv(ctx, x, "stem.conv", stem, 3, 1, 1, true)?;
    let h = ctx.g.relu(h)?;
    let h = ctx.g.max_pool2d(h, 2, 2)?;
    let h = ctx.g.max_pool2d(h, 2, 2)?;
    let mut feats = vec![h];
    for i in 0..cfg.dense_layers {
        let cat = if feats.len() == 1 { feats[0] } else { ctx.g.concat(&feats, 1)? };
        let y = conv(ctx, cat, &format!("dense.layer{}", i + 1), growth, 3, 1, 1, true)?;
        feats.push(ctx.g.relu(y)?);
    }
    let cat = ctx.g.concat(&feats, 1)?;
    let h = pointwise(ctx, cat, "transition", cfg.embed_dim)?;
    ctx.set_hook("transition", h);
    let h = ctx.g.relu(h)?;
    let h = ctx.g.avg_pool2d(h, 2, 2)?;
    let s = ctx.g.shape(h).to_vec();
    let (b, d, gh, gw) = (s[0], s[1], s[2], s[3]);
    let t = ctx.g.reshape(h, &[b, d, gh * gw])?;
    let t = ctx.g.transpose(t, &[0, 2, 1])?;
    let t = add_position(ctx, t)?;
    let mut t = t;
    for i in 0..cfg.depth {
        t = encoder_block(ctx, t, &format!("blocks.{i}"), cfg.heads, cfg.mlp_ratio, (gh, gw))?;
    }
    let t = layer_norm(ctx, t, "norm")?;
    let m = ctx.g.transpose(t, &[0, 2, 1])?;
    let m = ctx.g.reshape(m, &[b, d, gh, gw])?;
    let pooled = ctx.g.global_avg_pool(m)?;
    head(ctx, cfg, pooled)
}

fn convmixer<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, cfg: &ModelConfig, x: Var) -> R {
    let dim = cfg.embed_dim;
    let h = conv(ctx, x, "patch_embed", dim, cfg.patch, cfg.patch, 0, true)?;
    let h = ctx.g.gelu(h)?;
    let mut h = batch_norm(ctx, h, "patch_bn")?;
    for i in 0..cfg.depth {
        let name = format!("blocks.{i}");
        let r = depthwise(ctx, h, &format!("{name}.dw"), cfg.kernel)?;
        let r = ctx.g.gelu(r)?;
        let r = batch_norm(ctx, r, &format!("{name}.bn1"))?;
        h = ctx.g.add(h, r)?;
        h = pointwise(ctx, h, &format!("{name}.pw"), dim)?;
        h = ctx.g.gelu(h)?;
        h = batch_norm(ctx, h, &format!("{name}.bn2"))?;
    }
    ctx.set_hook(&format!("blocks.{}", cfg.depth - 1), h);
    let pooled = ctx.g.global_avg_pool(h)?;
    head(ctx, cfg, pooled)
}

fn convnext<S: Scalar>(ctx: &mut Ctx<'_, '_, S>, cfg: &ModelConfig, x: Var) -> R {
    let mut h = conv(ctx, x, "stem.conv", cfg.channels[0], cfg.patch, cfg.patch, 0, true)?;
    h = channel_norm(ctx, h, "stem.norm")?;
    let stages = cfg.channels.len();
    for (si, &c) in cfg.channels.iter().enumerate() {
        if si > 0 {
            h = channel_norm(ctx, h, &format!("down{si}.norm"))?;
            h = conv(ctx, h, &format!("down{si}.conv"), c, 2, 2, 0, true)?;
        }
        for bi in 0..cfg.depths[si] {
            let name = format!("stage{}.block{}", si + 1, bi + 1);
            let r = depthwise(ctx, h, &format!("{name}.dw"), cfg.kernel)?;
            let r = ctx.g.transpose(r, &[0, 2, 3, 1])?;
            let r = layer_norm(ctx, r, &format!("{name}.norm"))?;
            let r = mlp(ctx, r, &format!("{name}.mlp"), c * cfg.mlp_ratio)?;
            let r = ctx.g.transpose(r, &[0, 3, 1, 2])?;
            h = ctx.g.add(h, r)?;
        }
        if si + 1 == stages {
            ctx.set_hook(&format!("stage{}", si + 1), h);
        }
    }
    let pooled = ctx.g.global_avg_pool(h)?;
    let pooled = layer_norm(ctx, pooled, "head_norm")?;
    head(ctx, cfg, pooled)
}
