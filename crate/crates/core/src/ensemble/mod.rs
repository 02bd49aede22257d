//! Three-tier ensemble: a primary classifier decides confident cases alone;
//! uncertain ones go to every member, whose malignant probabilities are
//! fused by weighted average and flagged for review when members disagree.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{to_model_input, Label, LabeledImage, NormStats};
use crate::enhance::{enhance, EnhanceConfig, EnhanceError, EnhancementKind};
use crate::image::ImageGray;
use crate::models::{load_checkpoint, CheckpointError, ModelError, ModelKind};
use crate::Model;
use crate::train::meta;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble config: {0}")]
    Config(String),
    #[error("validation split is empty")]
    EmptySplit,
    #[error("member {member}: {source}")]
    Enhance {
        member: usize,
        #[source]
        source: EnhanceError,
    },
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: CheckpointError,
    },
    #[error("checkpoint is missing metadata `{0}`")]
    Metadata(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub model: ModelKind,
    pub enhancement: EnhancementKind,
    /// Defaults to `<model>_<enhancement>.ckpt` under the checkpoint directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl MemberSpec {
    pub fn new(model: ModelKind, enhancement: EnhancementKind) -> Self {
        Self {
            model,
            enhancement,
            checkpoint: None,
        }
    }

    pub fn checkpoint_in(&self, dir: &Path) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| dir.join(checkpoint_name(self.model, self.enhancement)))
    }
}

/// File name used for a trained `(model, enhancement)` checkpoint.
pub fn checkpoint_name(model: ModelKind, enhancement: EnhancementKind) -> String {
    format!("{}_{}.ckpt", model.as_str(), enhancement.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// The first member is the primary classifier.
    pub members: Vec<MemberSpec>,
    /// Per-member weights; `None` calibrates them from validation accuracy.
    pub weights: Option<Vec<f64>>,
    pub divergence_threshold: f64,
    /// Primary probabilities in `[lo, hi]` escalate.
    pub confidence_band: (f64, f64),
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: vec![
                MemberSpec::new(ModelKind::ResNetLite, EnhancementKind::Original),
                MemberSpec::new(ModelKind::VitLite, EnhancementKind::Ahe),
                MemberSpec::new(ModelKind::SwinLite, EnhancementKind::Hog),
            ],
            weights: None,
            divergence_threshold: 0.3,
            confidence_band: (0.2, 0.8),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.members.is_empty() {
            return Err(EnsembleError::Config("at least one member is required".into()));
        }
        check_rules(self.divergence_threshold, self.confidence_band)?;
        if let Some(w) = &self.weights {
            check_weights(w, self.members.len())?;
        }
        Ok(())
    }
}

fn check_rules(threshold: f64, (lo, hi): (f64, f64)) -> Result<(), EnsembleError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(EnsembleError::Config(format!("divergence_threshold {threshold} must lie in (0, 1]")));
    }
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(EnsembleError::Config(format!(
            "confidence_band ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1"
        )));
    }
    Ok(())
}

fn check_weights(w: &[f64], n: usize) -> Result<(), EnsembleError> {
    if w.len() != n {
        return Err(EnsembleError::Config(format!("{} weights for {n} members", w.len())));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(EnsembleError::Config("weights must be finite and >= 0".into()));
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(EnsembleError::Config("weights are all zero".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Primary,
    FullEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub id: String,
    pub tier: Tier,
    /// Primary only on tier 1, every member otherwise.
    pub member_probs: Vec<f64>,
    pub fused_prob: f64,
    pub label: Label,
    pub flagged: bool,
}

impl EnsembleDecision {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("decision serializes")
    }
}

/// A classifier that maps a raw image to a malignant probability, applying
/// its own preprocessing.
pub trait Member: Sync {
    fn malignant_prob(&self, img: &ImageGray) -> Result<f64, EnsembleError>;
}

/// A trained model plus the enhancement and normalization it was trained
/// with.
#[derive(Debug, Clone)]
pub struct ModelMember {
    pub model: Model,
    pub enhancement: EnhancementKind,
    pub enhance_cfg: EnhanceConfig,
    pub stats: NormStats,
}

impl ModelMember {
    /// Reads preprocessing from the metadata written at training time.
    pub fn from_model(model: Model, enhance_cfg: EnhanceConfig) -> Result<Self, EnsembleError> {
        let get = |k: &str| model.metadata.get(k).cloned().ok_or_else(|| EnsembleError::Metadata(k.into()));
        let enhancement = get(meta::ENHANCEMENT)?
            .parse()
            .map_err(|_| EnsembleError::Metadata(meta::ENHANCEMENT.into()))?;
        let num = |k: &str| -> Result<f64, EnsembleError> { get(k)?.parse().map_err(|_| EnsembleError::Metadata(k.into())) };
        let stats = NormStats {
            mean: num(meta::NORM_MEAN)?,
            std: num(meta::NORM_STD)?,
        };
        Ok(Self {
            model,
            enhancement,
            enhance_cfg,
            stats,
        })
    }

    pub fn load(path: &Path, expected: Option<ModelKind>, enhance_cfg: EnhanceConfig) -> Result<Self, EnsembleError> {
        let model = load_checkpoint(path, expected).map_err(|source| EnsembleError::Checkpoint {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_model(model, enhance_cfg)
    }

    /// Validation accuracy recorded at training time, if present.
    pub fn val_accuracy(&self) -> Option<f64> {
        self.model.metadata.get(meta::VAL_ACCURACY).and_then(|v| v.parse().ok())
    }

    /// Model input `[1, 1, side, side]` for a raw image.
    pub fn input(&self, img: &ImageGray) -> Result<crate::Tensor, EnhanceError> {
        let side = self.model.config().input_side;
        let enhanced = enhance(img, self.enhancement, &self.enhance_cfg)?;
        let x = to_model_input(&enhanced, side, &self.stats);
        Ok(x.reshaped(&[1, 1, side, side]).expect("same element count"))
    }
}

impl Member for ModelMember {
    fn malignant_prob(&self, img: &ImageGray) -> Result<f64, EnsembleError> {
        let x = self.input(img).map_err(|source| EnsembleError::Enhance { member: 0, source })?;
        let logits = self.model.predict(&x)?.to_f64_vec();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        Ok((logits[1] - max).exp() / z)
    }
}

/// Weights proportional to each member's accuracy on `val`, summing to 1.
pub fn calibrate_weights(members: &[&dyn Member], val: &[LabeledImage]) -> Result<Vec<f64>, EnsembleError> {
    if val.is_empty() {
        return Err(EnsembleError::EmptySplit);
    }
    let accs: Vec<f64> = members
        .iter()
        .map(|m| {
            let mut hits = 0usize;
            for item in val {
                let p = m.malignant_prob(&item.image)?;
                hits += usize::from((p >= 0.5) == (item.label == Label::Malignant));
            }
            Ok(hits as f64 / val.len() as f64)
        })
        .collect::<Result<_, EnsembleError>>()?;
    normalize_weights(&accs)
}

/// Rescales nonnegative scores to sum to 1.
pub fn normalize_weights(scores: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    check_weights(scores, scores.len())?;
    let total: f64 = scores.iter().sum();
    Ok(scores.iter().map(|s| s / total).collect())
}

/// Weighted mean of `probs` and whether their spread exceeds `threshold`.
pub fn fuse(probs: &[f64], weights: &[f64], threshold: f64) -> (f64, bool) {
    let wsum: f64 = weights.iter().sum();
    let fused = probs.iter().zip(weights).map(|(p, w)| w / wsum * p).sum::<f64>();
    let hi = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
    (fused, hi - lo > threshold)
}

fn label_of(p: f64) -> Label {
    if p >= 0.5 {
        Label::Malignant
    } else {
        Label::Benign
    }
}

pub struct Ensemble<'a> {
    members: Vec<&'a dyn Member>,
    weights: Vec<f64>,
    divergence_threshold: f64,
    band: (f64, f64),
    calls: Vec<AtomicUsize>,
}

impl<'a> Ensemble<'a> {
    /// `weights` must have one nonnegative entry per member, not all zero.
    pub fn new(members: Vec<&'a dyn Member>, weights: Vec<f64>, cfg: &EnsembleConfig) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::Config("at least one member is required".into()));
        }
        check_weights(&weights, members.len())?;
        check_rules(cfg.divergence_threshold, cfg.confidence_band)?;
        let calls = members.iter().map(|_| AtomicUsize::new(0)).collect();
        Ok(Self {
            members,
            weights,
            divergence_threshold: cfg.divergence_threshold,
            band: cfg.confidence_band,
            calls,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// How often each member has been evaluated.
    pub fn invocations(&self) -> Vec<usize> {
        self.calls.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    fn run(&self, i: usize, img: &ImageGray) -> Result<f64, EnsembleError> {
        self.calls[i].fetch_add(1, Ordering::Relaxed);
        self.members[i].malignant_prob(img).map_err(|e| match e {
            EnsembleError::Enhance { source, .. } => EnsembleError::Enhance { member: i, source },
            other => other,
        })
    }

    pub fn predict(&self, id: &str, img: &ImageGray) -> Result<EnsembleDecision, EnsembleError> {
        let p0 = self.run(0, img)?;
        let (lo, hi) = self.band;
        if !(lo <= p0 && p0 <= hi) {
            return Ok(EnsembleDecision {
                id: id.to_string(),
                tier: Tier::Primary,
                member_probs: vec![p0],
                fused_prob: p0,
                label: label_of(p0),
                flagged: false,
            });
        }
        let rest: Vec<f64> = (1..self.members.len())
            .into_par_iter()
            .map(|i| self.run(i, img))
            .collect::<Result<_, _>>()?;
        let probs: Vec<f64> = std::iter::once(p0).chain(rest).collect();
        let (fused, flagged) = fuse(&probs, &self.weights, self.divergence_threshold);
        Ok(EnsembleDecision {
            id: id.to_string(),
            tier: Tier::FullEnsemble,
            member_probs: probs,
            fused_prob: fused,
            label: label_of(fused),
            flagged,
        })
    }
}
