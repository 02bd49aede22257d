//! Binary classification metrics with malignant (class 1) as the positive
//! class. Undefined ratios (zero denominators) are `None`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("class label {0} is not 0 or 1")]
    Label(usize),
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("precision-recall curve needs at least one positive")]
    NoPositives,
    #[error("score {0} is not finite")]
    Score(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_labels(labels: &[usize]) -> Result<(), EvalError> {
    match labels.iter().find(|&&l| l > 1) {
        Some(&l) => Err(EvalError::Label(l)),
        None => Ok(()),
    }
}

pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    check_labels(preds)?;
    check_labels(labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => cm.tp += 1,
            (1, _) => cm.fp += 1,
            (_, 1) => cm.fn_ += 1,
            _ => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    /// Sensitivity.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Metrics {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        precision,
        recall,
        f1,
    }
}

/// `(false positive rate, true positive rate)` pairs from `(0, 0)` to `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Distinct scores in descending order with the positive and negative counts
/// at each.
fn grouped(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, usize, usize)>, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    check_labels(labels)?;
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::Score(s));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if labels[i] == 1 {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, usize::from(labels[i] == 1), usize::from(labels[i] != 1))),
        }
    }
    Ok(groups)
}

/// Threshold sweep over the distinct scores (predict positive when
/// `score ≥ threshold`); equal scores move the curve in one diagonal step.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<RocCurve, EvalError> {
    let groups = grouped(scores, labels)?;
    let pos: usize = groups.iter().map(|g| g.1).sum();
    let neg: usize = groups.iter().map(|g| g.2).sum();
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for &(_, p, n) in &groups {
        let (x0, y0) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        tp += p;
        fp += n;
        let (x1, y1) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        area += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(RocCurve { points, auc: area })
}

/// `(recall, precision)` at each distinct-score threshold, highest first.
pub fn pr_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>, EvalError> {
    let groups = grouped(scores, labels)?;
    let pos: usize = groups.iter().map(|g| g.1).sum();
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::with_capacity(groups.len());
    for &(_, p, n) in &groups {
        tp += p;
        fp += n;
        out.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(out)
}

/// Predicted class from a malignant probability.
pub fn threshold(probs: &[f64], cut: f64) -> Vec<usize> {
    probs.iter().map(|&p| usize::from(p >= cut)).collect()
}

/// Formats an optional metric for CSV and markdown; undefined prints `NA`.
pub fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) => format!("{x:.digits$}"),
        None => "NA".to_string(),
    }
}

pub const METRICS_CSV_HEADER: &str = "model,enhancement,accuracy,precision,recall,f1,auc";

pub fn metrics_csv_row(model: &str, enhancement: &str, m: &Metrics, auc: Option<f64>) -> String {
    format!(
        "{model},{enhancement},{},{},{},{},{}",
        fmt_opt(m.accuracy, 6),
        fmt_opt(m.precision, 6),
        fmt_opt(m.recall, 6),
        fmt_opt(m.f1, 6),
        fmt_opt(auc, 6)
    )
}

/// Two-column CSV with a header row.
pub fn curve_csv(header: (&str, &str), points: &[(f64, f64)]) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (a, b) in points {
        let _ = writeln!(out, "{a},{b}");
    }
    out
}
