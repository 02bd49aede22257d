//! Supervised training: cross-entropy loss, AdamW with step-decayed learning
//! rate, deterministic epoch loop and best-validation model selection.

mod prepare;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Model, ModelError, ParamRole};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{GradientMap, Graph, Tensor, TensorError};

pub use prepare::{prepare, PreparedData, PreparedSplit};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite training loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Multiplicative decay applied every `step` epochs.
    pub gamma: f64,
    pub step: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Per-class loss weights; `None` weighs every sample equally.
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr0: 1e-3,
            gamma: 0.1,
            step: 7,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            class_weights: None,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.step < 1 {
            return bad("step must be >= 1");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
                return bad("class weights must be >= 0 and not all zero");
            }
        }
        Ok(())
    }
}

/// Step decay `lr0 · gamma^⌊t / step⌋` for epoch `t` (0-based).
pub fn lr_schedule(t: usize, cfg: &TrainConfig) -> f64 {
    let k = (t / cfg.step.max(1)) as i32;
    let inv = 1.0 / cfg.gamma;
    // dividing by an integral reciprocal keeps decimal rates such as 1e-4 exact
    if inv.fract() == 0.0 {
        cfg.lr0 / inv.powi(k)
    } else {
        cfg.lr0 * cfg.gamma.powi(k)
    }
}

/// Mean negative log-likelihood of the labels under `softmax(logits)`.
pub fn cross_entropy<S: Scalar>(
    g: &mut Graph<S>,
    logits: crate::tensor::Var,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<crate::tensor::Var, TrainError> {
    let classes = *g.shape(logits).last().unwrap_or(&0);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::Label { label, classes });
    }
    Ok(g.cross_entropy(logits, labels, class_weights)?)
}

/// AdamW moments, kept in `f64` and keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW update of every trainable parameter. Weight decay is decoupled
/// (`p ← p − lr·wd·p`) and applies to weight tensors only.
pub fn adamw_step<S: Scalar>(
    model: &mut Model<S>,
    grads: &GradientMap<S>,
    state: &mut AdamWState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for p in model.params() {
        if p.role.trainable() && !grads.contains(&p.name) {
            return Err(TrainError::MissingGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for p in model.params_mut() {
        if !p.role.trainable() {
            continue;
        }
        let g = grads.get(&p.name).expect("checked above");
        let n = p.value.numel();
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let decay = if p.role == ParamRole::Weight { lr * cfg.weight_decay } else { 0.0 };
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i].widen();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mut x = w.widen();
            x -= decay * x;
            x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            *w = S::narrow(x);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainHistory {
    /// Index of the highest validation accuracy; ties go to the earlier epoch.
    pub fn select_best(val_acc: &[f64]) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &a) in val_acc.iter().enumerate() {
            if best.is_none_or(|b| a > val_acc[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Loss, accuracy and per-sample outputs of a model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Softmax probability of class 1 (malignant) per sample.
    pub probs: Vec<f64>,
    pub preds: Vec<usize>,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward pass over a split in chunks of `batch_size`, without gradients.
pub fn evaluate<S: Scalar>(model: &Model<S>, split: &PreparedSplit, batch_size: usize) -> Result<Evaluation, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let mut probs = Vec::with_capacity(split.len());
    let mut preds = Vec::with_capacity(split.len());
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = split.batch::<S>(chunk);
        let logits = model.predict(&x)?;
        let c = logits.shape()[1];
        for (row, &i) in logits.to_f64_vec().chunks(c).zip(chunk) {
            let p = softmax_row(row);
            let label = split.labels[i];
            loss -= p[label].max(f64::MIN_POSITIVE).ln();
            let pred = argmax(row);
            correct += usize::from(pred == label);
            probs.push(p.get(1).copied().unwrap_or(0.0));
            preds.push(pred);
        }
    }
    let n = split.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        probs,
        preds,
    })
}

/// Trains for `cfg.epochs` epochs and returns the parameters from the epoch
/// with the highest validation accuracy (earliest on ties), together with
/// the per-epoch history.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    data: &PreparedData,
    cfg: &TrainConfig,
) -> Result<(Model<S>, TrainHistory), TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let weights = cfg.class_weights.as_deref();
    let mut state = AdamWState::new();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model<S>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[0x7472_6169_6e, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(data.train.batch::<S>(chunk));
            let f = model.forward(&mut g, x, true)?;
            let loss = cross_entropy(&mut g, f.logits, &labels, weights)?;
            let lv = g.value(loss).data()[0].widen();
            if !lv.is_finite() {
                return Err(TrainError::NonFinite { epoch });
            }
            loss_sum += lv * chunk.len() as f64;
            let logits = g.value(f.logits).to_f64_vec();
            let c = logits.len() / chunk.len();
            for (row, &l) in logits.chunks(c).zip(&labels) {
                correct += usize::from(argmax(row) == l);
            }
            let grads = g.backward(loss)?;
            adamw_step(&mut model, &grads, &mut state, lr, cfg)?;
        }
        let n = data.train.len() as f64;
        let val = evaluate(&model, &data.val, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss: val.loss,
            val_acc: val.accuracy,
        };
        log::info!(
            "{} epoch {epoch}: lr {lr:e} train loss {:.4} acc {:.4} val loss {:.4} acc {:.4}",
            model.kind(),
            rec.train_loss,
            rec.train_acc,
            rec.val_loss,
            rec.val_acc
        );
        history.epochs.push(rec);
        if best.as_ref().is_none_or(|(a, _)| val.accuracy > *a) {
            best = Some((val.accuracy, model.clone()));
            history.best_epoch = epoch;
            history.best_val_accuracy = val.accuracy;
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, history))
}

/// Checkpoint metadata keys written by [`annotate`].
pub mod meta {
    pub const ENHANCEMENT: &str = "enhancement";
    pub const NORM_MEAN: &str = "norm_mean";
    pub const NORM_STD: &str = "norm_std";
    pub const VAL_ACCURACY: &str = "val_accuracy";
    pub const BEST_EPOCH: &str = "best_epoch";
}

/// Records the preprocessing and selection result on the model so a saved
/// checkpoint can be used on raw images later.
pub fn annotate<S: Scalar>(model: &mut Model<S>, data: &PreparedData, history: &TrainHistory) {
    let m = &mut model.metadata;
    m.insert(meta::ENHANCEMENT.into(), data.enhancement.as_str().into());
    m.insert(meta::NORM_MEAN.into(), data.stats.mean.to_string());
    m.insert(meta::NORM_STD.into(), data.stats.std.to_string());
    m.insert(meta::VAL_ACCURACY.into(), format!("{}", history.best_val_accuracy));
    m.insert(meta::BEST_EPOCH.into(), history.best_epoch.to_string());
}

/// Stacks `[1, side, side]` inputs into a `[B, 1, side, side]` batch.
pub(crate) fn stack_inputs<S: Scalar>(items: &[&Tensor<f32>]) -> Tensor<S> {
    let side = items[0].shape()[1];
    let mut data = Vec::with_capacity(items.len() * side * side);
    for t in items {
        data.extend(t.data().iter().map(|&v| S::narrow(v as f64)));
    }
    Tensor::new(vec![items.len(), 1, side, side], data).expect("batch shape")
}
