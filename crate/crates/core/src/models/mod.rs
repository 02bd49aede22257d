//! Seven toy-scale image classifiers over a common interface.
//!
//! A [`Model`] owns named parameter tensors and rebuilds its computation on
//! a caller-supplied [`Graph`] for each forward pass, so gradients come from
//! the ordinary tape.

mod arch;
pub mod checkpoint;
mod ctx;
pub mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use ctx::{Ctx, Mode};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use layers::{scaled_dot_attention, BlockHarness};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input shape {got:?} does not match [B, 1, {side}, {side}]")]
    InputShape { got: Vec<usize>, side: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BaseCnn,
    ResNetLite,
    VitLite,
    SwinLite,
    DenseTransformer,
    ConvMixerLite,
    ConvNextLite,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::BaseCnn,
        ModelKind::ResNetLite,
        ModelKind::VitLite,
        ModelKind::SwinLite,
        ModelKind::DenseTransformer,
        ModelKind::ConvMixerLite,
        ModelKind::ConvNextLite,
    ];

    /// Byte written to checkpoint headers.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    /// Machine identifier used in file names and configs.
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::BaseCnn => "base_cnn",
            ModelKind::ResNetLite => "resnet_lite",
            ModelKind::VitLite => "vit_lite",
            ModelKind::SwinLite => "swin_lite",
            ModelKind::DenseTransformer => "dense_transformer",
            ModelKind::ConvMixerLite => "convmixer_lite",
            ModelKind::ConvNextLite => "convnext_lite",
        }
    }

    /// Human-readable name for reports.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::BaseCnn => "BaseCNN",
            ModelKind::ResNetLite => "ResNetLite",
            ModelKind::VitLite => "ViTLite",
            ModelKind::SwinLite => "SwinLite",
            ModelKind::DenseTransformer => "DenseTransformer",
            ModelKind::ConvMixerLite => "ConvMixerLite",
            ModelKind::ConvNextLite => "ConvNeXtLite",
        }
    }

    /// Kinds that contain self-attention and so support attention maps.
    pub fn has_attention(self) -> bool {
        matches!(self, ModelKind::VitLite | ModelKind::SwinLite | ModelKind::DenseTransformer)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        let kind = match key.as_str() {
            "basecnn" | "cnn" => ModelKind::BaseCnn,
            "resnetlite" | "resnet" => ModelKind::ResNetLite,
            "vitlite" | "vit" => ModelKind::VitLite,
            "swinlite" | "swin" => ModelKind::SwinLite,
            "densetransformer" | "dense" => ModelKind::DenseTransformer,
            "convmixerlite" | "convmixer" => ModelKind::ConvMixerLite,
            "convnextlite" | "convnext" => ModelKind::ConvNextLite,
            _ => return Err(format!("unknown model kind `{s}`")),
        };
        Ok(kind)
    }
}

/// Architecture hyperparameters. Fields a kind does not use are ignored
/// (but still serialized).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_side: usize,
    /// Per-stage widths.
    pub channels: Vec<usize>,
    /// Blocks per stage.
    pub depths: Vec<usize>,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Transformer blocks (ViT, DenseTransformer) or mixer blocks (ConvMixer).
    pub depth: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Depthwise kernel side.
    pub kernel: usize,
    /// Fully connected width in BaseCNN.
    pub hidden: usize,
    /// Conv layers in the dense stem of DenseTransformer.
    pub dense_layers: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::default_for(ModelKind::BaseCnn)
    }
}

impl ModelConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        let base = Self {
            input_side: 64,
            channels: vec![],
            depths: vec![],
            patch: 4,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            window: 4,
            mlp_ratio: 2,
            kernel: 5,
            hidden: 128,
            dense_layers: 3,
            num_classes: 2,
            seed: 42,
        };
        match kind {
            ModelKind::BaseCnn => Self {
                channels: vec![16, 32, 64, 128],
                ..base
            },
            ModelKind::ResNetLite => Self {
                channels: vec![16, 32, 64],
                depths: vec![2, 2, 2],
                ..base
            },
            ModelKind::VitLite => Self { patch: 8, ..base },
            ModelKind::SwinLite => Self {
                embed_dim: 48,
                heads: 3,
                depths: vec![2, 2],
                ..base
            },
            ModelKind::DenseTransformer => Self {
                channels: vec![16, 16],
                ..base
            },
            ModelKind::ConvMixerLite => Self { depth: 6, ..base },
            ModelKind::ConvNextLite => Self {
                channels: vec![32, 64],
                depths: vec![2, 2],
                kernel: 7,
                mlp_ratio: 4,
                ..base
            },
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let side = self.input_side;
        if side < 16 {
            return bad(format!("input_side {side} must be >= 16"));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        let divides = |d: usize, what: &str| -> Result<(), ModelError> {
            if d == 0 || side % d != 0 {
                Err(ModelError::Config(format!("input_side {side} is not divisible by {what} ({d})")))
            } else {
                Ok(())
            }
        };
        let heads_ok = |dim: usize, heads: usize| -> Result<(), ModelError> {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                Err(ModelError::Config(format!("embed_dim {dim} is not divisible by heads {heads}")))
            } else {
                Ok(())
            }
        };
        let stages = |n: usize, what: &str| -> Result<(), ModelError> {
            if n == 0 {
                Err(ModelError::Config(format!("{what} must not be empty")))
            } else {
                Ok(())
            }
        };
        if self.channels.contains(&0) || self.depths.contains(&0) {
            return bad("channel widths and stage depths must be positive".into());
        }
        match kind {
            ModelKind::BaseCnn => {
                stages(self.channels.len(), "channels")?;
                divides(1 << self.channels.len(), "the pooling factor")?;
                if self.hidden == 0 {
                    return bad("hidden must be positive".into());
                }
            }
            ModelKind::ResNetLite => {
                stages(self.channels.len(), "channels")?;
                if self.depths.len() != self.channels.len() {
                    return bad("depths and channels must have equal length".into());
                }
                divides(1 << self.channels.len(), "the downsampling factor")?;
            }
            ModelKind::VitLite => {
                divides(self.patch, "patch")?;
                heads_ok(self.embed_dim, self.heads)?;
            }
            ModelKind::SwinLite => {
                stages(self.depths.len(), "depths")?;
                let merge = 1usize << (self.depths.len() - 1);
                divides(self.window * self.patch * merge, "window x patch x merge factor")?;
                heads_ok(self.embed_dim, self.heads)?;
            }
            ModelKind::DenseTransformer => {
                stages(self.channels.len(), "channels")?;
                divides(8, "the stem and transition pooling factor")?;
                heads_ok(self.embed_dim, self.heads)?;
            }
            ModelKind::ConvMixerLite => {
                divides(self.patch, "patch")?;
                if self.kernel % 2 == 0 {
                    return bad("kernel must be odd".into());
                }
            }
            ModelKind::ConvNextLite => {
                stages(self.channels.len(), "channels")?;
                if self.depths.len() != self.channels.len() {
                    return bad("depths and channels must have equal length".into());
                }
                divides(self.patch << (self.channels.len() - 1), "patch x downsampling factor")?;
                if self.kernel % 2 == 0 {
                    return bad("kernel must be odd".into());
                }
            }
        }
        let depth_used = matches!(kind, ModelKind::VitLite | ModelKind::DenseTransformer | ModelKind::ConvMixerLite);
        if depth_used && self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Sorted `key=value` pairs.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        m.insert("channels".into(), list(&self.channels));
        m.insert("dense_layers".into(), self.dense_layers.to_string());
        m.insert("depth".into(), self.depth.to_string());
        m.insert("depths".into(), list(&self.depths));
        m.insert("embed_dim".into(), self.embed_dim.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("hidden".into(), self.hidden.to_string());
        m.insert("input_side".into(), self.input_side.to_string());
        m.insert("kernel".into(), self.kernel.to_string());
        m.insert("mlp_ratio".into(), self.mlp_ratio.to_string());
        m.insert("num_classes".into(), self.num_classes.to_string());
        m.insert("patch".into(), self.patch.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("window".into(), self.window.to_string());
        m
    }

    /// Inverse of [`to_pairs`](Self::to_pairs); every key must be present.
    pub fn from_pairs(m: &BTreeMap<String, String>) -> Result<Self, String> {
        let get = |k: &str| m.get(k).ok_or_else(|| format!("missing config key `{k}`"));
        let num = |k: &str| -> Result<usize, String> { get(k)?.parse().map_err(|_| format!("bad value for `{k}`")) };
        let list = |k: &str| -> Result<Vec<usize>, String> {
            let s = get(k)?;
            if s.is_empty() {
                return Ok(vec![]);
            }
            s.split(',').map(|x| x.parse().map_err(|_| format!("bad value for `{k}`"))).collect()
        };
        Ok(Self {
            input_side: num("input_side")?,
            channels: list("channels")?,
            depths: list("depths")?,
            patch: num("patch")?,
            embed_dim: num("embed_dim")?,
            heads: num("heads")?,
            depth: num("depth")?,
            window: num("window")?,
            mlp_ratio: num("mlp_ratio")?,
            kernel: num("kernel")?,
            hidden: num("hidden")?,
            dense_layers: num("dense_layers")?,
            num_classes: num("num_classes")?,
            seed: get("seed")?.parse().map_err(|_| "bad value for `seed`".to_string())?,
        })
    }
}

/// What a parameter is for; optimizers use this to pick weight decay and
/// to skip buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    Norm,
    Embedding,
    /// Non-trainable state (batch-norm statistics).
    Buffer,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        self != ParamRole::Buffer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<S>,
}

/// How the tokens of an attention block map back onto the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenLayout {
    /// `h × w` tokens in row-major order; weights are `[B, heads, n, n]`.
    Grid { h: usize, w: usize },
    /// Shifted windows over an `h × w` grid; weights are
    /// `[B·nW, heads, window², window²]` with windows taken after rolling by
    /// `-shift` on both axes.
    Windows {
        h: usize,
        w: usize,
        window: usize,
        shift: usize,
    },
}

#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub block: String,
    pub weights: Var,
    pub layout: TokenLayout,
}

/// Nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, num_classes]` raw logits.
    pub logits: Var,
    /// Feature map used by GradCAM, `[B, C, h, w]`.
    pub hook: Var,
    pub hook_name: String,
    /// Attention weights per block, in execution order.
    pub attention: Vec<AttnRecord>,
}

/// A classifier: kind, config, parameters in creation order, a layer list
/// and free-form metadata carried through checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    kind: ModelKind,
    config: ModelConfig,
    params: Vec<Param<S>>,
    layers: Vec<String>,
    hook_name: String,
    pub metadata: BTreeMap<String, String>,
}

impl<S: Scalar> Model<S> {
    /// Builds a freshly initialized model. Initialization is a function of
    /// `(kind, cfg)` only.
    pub fn build(kind: ModelKind, cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate(kind)?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, cfg.input_side, cfg.input_side]));
        let mode = Mode::Init {
            rng: seed::rng(cfg.seed, &[0x6d6f_64656c, kind.tag() as u64]),
            params: Vec::new(),
        };
        let mut ctx = Ctx::new(&mut g, mode);
        let logits = arch::forward(&mut ctx, kind, cfg, x)?;
        let shape = ctx.g.shape(logits).to_vec();
        if shape != [1, cfg.num_classes] {
            return Err(ModelError::Config(format!("architecture produced logits of shape {shape:?}")));
        }
        let (hook_name, _) = ctx.hook.clone().expect("every architecture sets a hook");
        let layers = std::mem::take(&mut ctx.layers);
        let Mode::Init { params, .. } = ctx.mode else { unreachable!() };
        let mut seen = std::collections::HashSet::new();
        for p in &params {
            assert!(seen.insert(p.name.as_str()), "duplicate parameter name {}", p.name);
        }
        Ok(Self {
            kind,
            config: cfg.clone(),
            params,
            layers,
            hook_name,
            metadata: BTreeMap::new(),
        })
    }

    /// Records the forward pass of `x: [B, 1, side, side]` on `g`. With
    /// `trainable`, every non-buffer parameter becomes a gradient leaf under
    /// its own name.
    pub fn forward(&self, g: &mut Graph<S>, x: Var, trainable: bool) -> Result<Forward, ModelError> {
        let shape = g.shape(x);
        let side = self.config.input_side;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != side || shape[3] != side {
            return Err(ModelError::InputShape {
                got: shape.to_vec(),
                side,
            });
        }
        let mode = Mode::Run {
            params: &self.params,
            trainable,
        };
        let mut ctx = Ctx::new(g, mode);
        let logits = arch::forward(&mut ctx, self.kind, &self.config, x)?;
        let (hook_name, hook) = ctx.hook.take().expect("every architecture sets a hook");
        Ok(Forward {
            logits,
            hook,
            hook_name,
            attention: std::mem::take(&mut ctx.attention),
        })
    }

    /// Logits for a batch on a throwaway graph.
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let f = self.forward(&mut g, x, false)?;
        Ok(g.value(f.logits).clone())
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().filter(|p| p.role.trainable()).map(|p| p.value.numel()).sum()
    }

    /// Ordered layer descriptions; the GradCAM hook is marked `[hook]`.
    pub fn topology(&self) -> &[String] {
        &self.layers
    }

    /// Name of the feature layer GradCAM reads.
    pub fn hook_name(&self) -> &str {
        &self.hook_name
    }

    /// Same model with parameters converted to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            kind: self.kind,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                })
                .collect(),
            layers: self.layers.clone(),
            hook_name: self.hook_name.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// Replaces parameter values, checking names and shapes against the
    /// architecture. Used by checkpoint loading.
    pub fn with_params(kind: ModelKind, cfg: &ModelConfig, values: Vec<(String, Tensor<S>)>) -> Result<Self, ModelError> {
        let mut model = Self::build(kind, cfg)?;
        let mut by_name: BTreeMap<String, Tensor<S>> = values.into_iter().collect();
        for p in &mut model.params {
            let v = by_name.remove(&p.name).ok_or_else(|| ModelError::MissingParam(p.name.clone()))?;
            if v.shape() != p.value.shape() {
                return Err(ModelError::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: v.shape().to_vec(),
                });
            }
            p.value = v;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(model)
    }
}
