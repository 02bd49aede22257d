//! Model × enhancement benchmark grid and its markdown report.

mod report;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::enhance::{EnhanceConfig, EnhancementKind};
use crate::ensemble::checkpoint_name;
use crate::eval::{confusion, metrics, roc_auc, ConfusionMatrix, Metrics};
use crate::models::{save_checkpoint, ModelConfig, ModelKind};
use crate::train::{annotate, evaluate, prepare, train, PreparedData, TrainConfig};

pub use report::{render_report, PUBLISHED, PUBLISHED_AVERAGE_ACCURACY};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    /// Row order of the report.
    pub models: Vec<(ModelKind, ModelConfig)>,
    /// Column order within each metric block.
    pub enhancements: Vec<EnhancementKind>,
    pub enhance: EnhanceConfig,
    /// Shared by every cell, so enhancements are compared from the same
    /// initialization and batch order.
    pub train: TrainConfig,
    pub side: usize,
}

impl GridSpec {
    /// All seven kinds and four enhancements at their defaults.
    pub fn full(side: usize, seed: u64, train: TrainConfig) -> Self {
        Self {
            models: ModelKind::ALL
                .iter()
                .map(|&k| {
                    let cfg = ModelConfig {
                        input_side: side,
                        seed,
                        ..ModelConfig::default_for(k)
                    };
                    (k, cfg)
                })
                .collect(),
            enhancements: EnhancementKind::ALL.to_vec(),
            enhance: EnhanceConfig::default(),
            train: TrainConfig { seed, ..train },
            side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub auc: Option<f64>,
    pub best_epoch: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: ModelKind,
    pub enhancement: EnhancementKind,
    /// Error text when the cell failed.
    pub outcome: Result<CellMetrics, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub models: Vec<ModelKind>,
    pub enhancements: Vec<EnhancementKind>,
    pub seed: u64,
    pub side: usize,
    pub epochs: usize,
    /// Train, val and test sizes.
    pub split_sizes: (usize, usize, usize),
    /// Row-major over `models × enhancements`.
    pub cells: Vec<Cell>,
}

impl GridResult {
    pub fn cell(&self, model: ModelKind, enhancement: EnhancementKind) -> Option<&Cell> {
        self.cells.iter().find(|c| c.model == model && c.enhancement == enhancement)
    }

    pub fn accuracy(&self, model: ModelKind, enhancement: EnhancementKind) -> Option<f64> {
        self.cell(model, enhancement)?.outcome.as_ref().ok()?.metrics.accuracy
    }

    /// Mean test accuracy per enhancement over the cells that succeeded.
    pub fn enhancement_averages(&self) -> Vec<(EnhancementKind, Option<f64>)> {
        self.enhancements
            .iter()
            .map(|&e| {
                let accs: Vec<f64> = self.models.iter().filter_map(|&m| self.accuracy(m, e)).collect();
                let mean = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
                (e, mean)
            })
            .collect()
    }

    pub const CSV_HEADER: &'static str =
        "model,enhancement,status,accuracy,precision,recall,f1,auc,tp,fp,tn,fn,best_epoch,val_accuracy";

    pub fn to_csv(&self) -> String {
        use crate::eval::fmt_opt;
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let (m, e) = (c.model.as_str(), c.enhancement.as_str());
            match &c.outcome {
                Ok(r) => out.push_str(&format!(
                    "{m},{e},ok,{},{},{},{},{},{},{},{},{},{},{:.6}\n",
                    fmt_opt(r.metrics.accuracy, 6),
                    fmt_opt(r.metrics.precision, 6),
                    fmt_opt(r.metrics.recall, 6),
                    fmt_opt(r.metrics.f1, 6),
                    fmt_opt(r.auc, 6),
                    r.confusion.tp,
                    r.confusion.fp,
                    r.confusion.tn,
                    r.confusion.fn_,
                    r.best_epoch,
                    r.val_accuracy
                )),
                Err(_) => out.push_str(&format!("{m},{e},failed,NA,NA,NA,NA,NA,NA,NA,NA,NA,NA,NA\n")),
            }
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<(), GridError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, GridError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn run_cell(
    kind: ModelKind,
    cfg: &ModelConfig,
    data: &PreparedData,
    train_cfg: &TrainConfig,
    checkpoints: Option<&Path>,
) -> Result<CellMetrics, String> {
    let model = crate::Model::build(kind, cfg).map_err(|e| e.to_string())?;
    let (mut best, history) = train(model, data, train_cfg).map_err(|e| e.to_string())?;
    let test = evaluate(&best, &data.test, train_cfg.batch_size).map_err(|e| e.to_string())?;
    let cm = confusion(&test.preds, &data.test.labels).map_err(|e| e.to_string())?;
    let auc = roc_auc(&test.probs, &data.test.labels).ok().map(|r| r.auc);
    if let Some(dir) = checkpoints {
        annotate(&mut best, data, &history);
        let stem = checkpoint_name(kind, data.enhancement);
        save_checkpoint(&best, &dir.join(&stem)).map_err(|e| format!("saving checkpoint: {e}"))?;
        let csv = dir.join(stem.replace(".ckpt", "_history.csv"));
        history.write_csv(&csv).map_err(|e| format!("writing history: {e}"))?;
    }
    Ok(CellMetrics {
        confusion: cm,
        metrics: metrics(&cm),
        auc,
        best_epoch: history.best_epoch,
        val_accuracy: history.best_val_accuracy,
    })
}

/// Trains every cell of the grid, in parallel across cells. A failing cell
/// is recorded and the rest continue. With `checkpoints`, each trained model
/// and its history are written there.
pub fn run_grid(ds: &Dataset, spec: &GridSpec, checkpoints: Option<&Path>) -> Result<GridResult, GridError> {
    if spec.models.is_empty() || spec.enhancements.is_empty() {
        return Err(GridError::Config("grid needs at least one model and one enhancement".into()));
    }
    spec.train.validate().map_err(|e| GridError::Config(e.to_string()))?;
    if let Some(dir) = checkpoints {
        std::fs::create_dir_all(dir)?;
    }
    let prepared: Vec<Result<PreparedData, String>> = spec
        .enhancements
        .iter()
        .map(|&e| prepare(ds, e, &spec.enhance, spec.side).map_err(|err| err.to_string()))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..spec.models.len())
        .flat_map(|m| (0..spec.enhancements.len()).map(move |e| (m, e)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(mi, ei)| {
            let (kind, cfg) = &spec.models[mi];
            let enhancement = spec.enhancements[ei];
            let outcome = match &prepared[ei] {
                Ok(data) => run_cell(*kind, cfg, data, &spec.train, checkpoints),
                Err(e) => Err(format!("enhancement failed: {e}")),
            };
            match &outcome {
                Ok(r) => log::info!("{kind}/{enhancement}: test accuracy {:?}", r.metrics.accuracy),
                Err(e) => log::warn!("{kind}/{enhancement} failed: {e}"),
            }
            Cell {
                model: *kind,
                enhancement,
                outcome,
            }
        })
        .collect();
    Ok(GridResult {
        models: spec.models.iter().map(|(k, _)| *k).collect(),
        enhancements: spec.enhancements.clone(),
        seed: spec.train.seed,
        side: spec.side,
        epochs: spec.train.epochs,
        split_sizes: (ds.train.len(), ds.val.len(), ds.test.len()),
        cells,
    })
}
