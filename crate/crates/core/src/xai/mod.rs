//! Attribution maps: saliency, integrated gradients, occlusion, GradCAM and
//! its guided variant, DeepLIFT (Rescale) and transformer attention maps,
//! plus heatmap overlays and a raw map dump.
//!
//! Every method explains the pre-softmax logit of `target_class` for a
//! single input `[1, C, H, W]` and returns a channel-summed `H × W` map.

mod attention;
mod methods;
mod overlay;

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Forward, Model, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use attention::{attention_map, attention_received};
pub use methods::{deeplift, gradcam, gradcam_cells, guided_backprop, guided_gradcam, input_gradient, integrated_gradients, occlusion, saliency};
pub use overlay::{overlay, palette, PALETTE_STOPS};

#[derive(Debug, Error)]
pub enum XaiError {
    #[error("invalid attribution config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
    #[error("attention maps need a transformer model")]
    NotTransformer,
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that records a differentiable forward pass on a graph.
///
/// `record` receives `[B, C, H, W]` and must treat batch rows independently.
pub trait Scorer<S: Scalar>: Sync {
    fn record(&self, g: &mut Graph<S>, x: Var) -> Result<Forward, XaiError>;
}

impl<S: Scalar> Scorer<S> for Model<S> {
    fn record(&self, g: &mut Graph<S>, x: Var) -> Result<Forward, XaiError> {
        Ok(self.forward(g, x, false)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XaiMethod {
    Saliency,
    IntegratedGradients,
    Occlusion,
    GradCam,
    GuidedGradCam,
    DeepLift,
    AttentionMap,
}

impl XaiMethod {
    pub const ALL: [XaiMethod; 7] = [
        Self::Saliency,
        Self::IntegratedGradients,
        Self::Occlusion,
        Self::GradCam,
        Self::GuidedGradCam,
        Self::DeepLift,
        Self::AttentionMap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Saliency => "saliency",
            Self::IntegratedGradients => "integrated_gradients",
            Self::Occlusion => "occlusion",
            Self::GradCam => "gradcam",
            Self::GuidedGradCam => "guided_gradcam",
            Self::DeepLift => "deeplift",
            Self::AttentionMap => "attention_map",
        }
    }
}

impl std::fmt::Display for XaiMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for XaiMethod {
    type Err = XaiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "saliency" => Self::Saliency,
            "integratedgradients" | "ig" => Self::IntegratedGradients,
            "occlusion" => Self::Occlusion,
            "gradcam" => Self::GradCam,
            "guidedgradcam" => Self::GuidedGradCam,
            "deeplift" => Self::DeepLift,
            "attentionmap" | "attention" => Self::AttentionMap,
            _ => return Err(XaiError::Config(format!("unknown attribution method `{s}`"))),
        })
    }
}

/// Reference input for integrated gradients and DeepLIFT, in model-input
/// units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Every element equal to [`XaiConfig::black_level`].
    Black,
    /// Explicit values, row-major over `[C, H, W]`.
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    /// Patch side; `None` means a quarter of the input side.
    pub patch: Option<usize>,
    /// `None` means half the patch.
    pub stride: Option<usize>,
    /// Model-input value pasted over the patch; `None` uses the black level.
    pub fill: Option<f64>,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            patch: None,
            stride: None,
            fill: None,
        }
    }
}

impl OcclusionConfig {
    /// `(patch, stride)` for an input of side `side`.
    pub fn resolve(&self, side: usize) -> Result<(usize, usize), XaiError> {
        let patch = self.patch.unwrap_or((side / 4).max(1));
        let stride = self.stride.unwrap_or((patch / 2).max(1));
        if patch == 0 || patch > side {
            return Err(XaiError::Config(format!("occlusion patch {patch} must be in 1..={side}")));
        }
        if stride == 0 {
            return Err(XaiError::Config("occlusion stride must be >= 1".into()));
        }
        Ok((patch, stride))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XaiConfig {
    pub method: XaiMethod,
    pub baseline: Baseline,
    /// Model-input value of a black pixel. It depends on the normalization
    /// the model was trained with; `None` means 0.
    pub black_level: Option<f64>,
    pub ig_steps: usize,
    pub occlusion: OcclusionConfig,
    pub target_class: usize,
    /// Attention rollout across all blocks instead of the final block only.
    pub rollout: bool,
    /// DeepLIFT through softmax and layer norm uses their gradient instead of
    /// failing.
    pub deeplift_linearize: bool,
}

impl Default for XaiConfig {
    fn default() -> Self {
        Self {
            method: XaiMethod::IntegratedGradients,
            baseline: Baseline::Black,
            black_level: None,
            ig_steps: 50,
            occlusion: OcclusionConfig::default(),
            target_class: 1,
            rollout: false,
            deeplift_linearize: true,
        }
    }
}

impl XaiConfig {
    pub fn validate(&self) -> Result<(), XaiError> {
        if self.ig_steps < 1 {
            return Err(XaiError::Config("ig_steps must be >= 1".into()));
        }
        if let Some(0) = self.occlusion.stride {
            return Err(XaiError::Config("occlusion stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Baseline tensor shaped like `x`.
    pub fn baseline_for<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>, XaiError> {
        match &self.baseline {
            Baseline::Black => Ok(Tensor::full(x.shape(), S::narrow(self.black_level.unwrap_or(0.0)))),
            Baseline::Custom(v) => {
                if v.len() != x.numel() {
                    return Err(XaiError::Shape(format!("baseline has {} values, input {}", v.len(), x.numel())));
                }
                Ok(Tensor::from_f64(x.shape(), v)?)
            }
        }
    }
}

/// Relevance per input pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttributionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, XaiError> {
        if values.len() != height * width {
            return Err(XaiError::Shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Row-major index of the largest value (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Min-max scaled to [0, 1]; a constant map becomes all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if !(span > 0.0) {
            return vec![0.0; self.values.len()];
        }
        self.values.iter().map(|v| (v - lo) / span).collect()
    }

    /// `width u32, height u32`, then `f32` values, all little endian.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self, XaiError> {
        if bytes.len() < 8 {
            return Err(XaiError::Shape("raw map shorter than its header".into()));
        }
        let w = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if Some(body.len()) != w.checked_mul(h).and_then(|n| n.checked_mul(4)) {
            return Err(XaiError::Shape(format!("raw map body of {} bytes for {w}x{h}", body.len())));
        }
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::new(h, w, values)
    }

    pub fn write_raw(&self, path: &Path) -> Result<(), XaiError> {
        std::fs::File::create(path)?.write_all(&self.to_raw_bytes())?;
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<Self, XaiError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_raw_bytes(&bytes)
    }
}

/// Runs the method selected in `cfg`.
pub fn explain<S: Scalar>(scorer: &impl Scorer<S>, x: &Tensor<S>, cfg: &XaiConfig) -> Result<AttributionMap, XaiError> {
    cfg.validate()?;
    let class = cfg.target_class;
    match cfg.method {
        XaiMethod::Saliency => saliency(scorer, x, class),
        XaiMethod::IntegratedGradients => integrated_gradients(scorer, x, &cfg.baseline_for(x)?, cfg.ig_steps, class),
        XaiMethod::Occlusion => {
            let (patch, stride) = cfg.occlusion.resolve(x.shape().get(2).copied().unwrap_or(0))?;
            let fill = cfg.occlusion.fill.or(cfg.black_level).unwrap_or(0.0);
            occlusion(scorer, x, class, patch, stride, fill)
        }
        XaiMethod::GradCam => gradcam(scorer, x, class),
        XaiMethod::GuidedGradCam => guided_gradcam(scorer, x, class),
        XaiMethod::DeepLift => deeplift(scorer, x, &cfg.baseline_for(x)?, class, cfg.deeplift_linearize),
        XaiMethod::AttentionMap => attention_map(scorer, x, cfg.rollout),
    }
}

/// `(C, H, W)` of a single-image batch.
pub(crate) fn input_dims<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize), XaiError> {
    match x.shape() {
        &[1, c, h, w] => Ok((c, h, w)),
        s => Err(XaiError::Shape(format!("expected a [1, C, H, W] input, got {s:?}"))),
    }
}

/// Sums `[.., C, H, W]` values over channels into an `H × W` map.
pub(crate) fn channel_sum(values: &[f64], c: usize, h: usize, w: usize) -> AttributionMap {
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&values[ch * plane..(ch + 1) * plane]) {
            *o += v;
        }
    }
    AttributionMap {
        height: h,
        width: w,
        values: out,
    }
}
