use std::fmt::Write;

use super::GridResult;
use crate::enhance::EnhancementKind;
use crate::eval::Metrics;
use crate::models::ModelKind;

/// Published full-scale results in percent, rows in [`ModelKind::ALL`]
/// order. Each row holds accuracy, precision, recall and F1 blocks, each
/// ordered Orig, Neg, AHE, HOG.
pub const PUBLISHED: [[f64; 16]; 7] = [
    [
        99.9, 99.9, 99.9, 99.7, 99.9, 99.9, 99.9, 99.7, 99.9, 99.9, 99.9, 99.7, 99.9, 99.9, 99.9, 99.7,
    ],
    [
        99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9,
    ],
    [
        94.0, 54.3, 98.3, 99.0, 94.3, 56.6, 98.3, 99.0, 94.0, 54.3, 98.3, 99.0, 94.0, 51.9, 98.3, 99.0,
    ],
    [
        83.3, 91.3, 51.7, 96.3, 87.4, 92.7, 26.7, 96.6, 83.3, 91.3, 51.7, 96.3, 82.8, 91.3, 35.2, 96.3,
    ],
    [
        91.7, 99.9, 94.0, 95.0, 92.8, 99.9, 94.7, 95.2, 91.7, 99.9, 94.0, 95.0, 91.6, 99.9, 94.0, 95.0,
    ],
    [
        99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9, 99.9,
    ],
    [
        99.9, 99.9, 99.9, 99.0, 99.9, 99.9, 99.9, 99.0, 99.9, 99.9, 99.9, 99.0, 99.9, 99.9, 99.9, 99.0,
    ],
];

/// Published average accuracy per enhancement (Orig, Neg, AHE, HOG).
pub const PUBLISHED_AVERAGE_ACCURACY: [f64; 4] = [95.6, 92.2, 92.0, 98.4];

const METRIC_NAMES: [&str; 4] = ["Acc", "Prec", "Rec", "F1"];

fn short(e: EnhancementKind) -> &'static str {
    match e {
        EnhancementKind::Original => "Orig",
        EnhancementKind::Negative => "Neg",
        EnhancementKind::Ahe => "AHE",
        EnhancementKind::Hog => "HOG",
    }
}

fn col(e: EnhancementKind) -> usize {
    EnhancementKind::ALL.iter().position(|&k| k == e).expect("known enhancement")
}

fn row(m: ModelKind) -> usize {
    ModelKind::ALL.iter().position(|&k| k == m).expect("known model")
}

fn pick(m: &Metrics, block: usize) -> Option<f64> {
    [m.accuracy, m.precision, m.recall, m.f1][block]
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{:.1}", 100.0 * x))
}

fn signed(v: f64) -> String {
    format!("{v:+.1}")
}

fn table_header(out: &mut String, first: &str, enh: &[EnhancementKind]) {
    let mut head = format!("| {first} |");
    let mut rule = String::from("|---|");
    for name in METRIC_NAMES {
        for &e in enh {
            let _ = write!(head, " {name} {} |", short(e));
            rule.push_str("---:|");
        }
    }
    let _ = writeln!(out, "{head}\n{rule}");
}

/// Markdown report: the desk-scale matrix in the published table's shape,
/// average accuracy per enhancement, per-model accuracy changes against the
/// original images, the published full-scale numbers, and any failures.
/// Depends only on `result`, so equal results render to equal bytes.
pub fn render_report(result: &GridResult) -> String {
    let enh = &result.enhancements;
    let (tr, va, te) = result.split_sizes;
    let mut out = String::new();
    let _ = writeln!(out, "# Model × enhancement grid\n");
    let _ = writeln!(
        out,
        "Desk-scale run on {tr} train / {va} val / {te} test images at {s}x{s}, seed {seed}, {ep} epochs. \
         Every cell uses the same seed. Values are test-split percentages; precision, recall and F1 are for \
         the malignant class. `NA` marks an undefined ratio, `ERR` a failed cell.\n",
        s = result.side,
        seed = result.seed,
        ep = result.epochs,
    );

    let _ = writeln!(out, "## Desk-scale results (%)\n");
    table_header(&mut out, "Model", enh);
    for &m in &result.models {
        let mut line = format!("| {} |", m.display_name());
        for block in 0..4 {
            for &e in enh {
                let cell = match result.cell(m, e).map(|c| &c.outcome) {
                    Some(Ok(r)) => pct(pick(&r.metrics, block)),
                    _ => "ERR".to_string(),
                };
                let _ = write!(line, " {cell} |");
            }
        }
        let _ = writeln!(out, "{line}");
    }
    let mut avg = String::from("| Average |");
    for block in 0..4 {
        for &e in enh {
            let vals: Vec<f64> = result
                .models
                .iter()
                .filter_map(|&m| result.cell(m, e)?.outcome.as_ref().ok().and_then(|r| pick(&r.metrics, block)))
                .collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            let _ = write!(avg, " {} |", pct(mean));
        }
    }
    let _ = writeln!(out, "{avg}\n");

    let _ = writeln!(out, "## Average accuracy by enhancement (%)\n");
    let _ = writeln!(out, "| Enhancement | Desk-scale | Published full-scale |\n|---|---:|---:|");
    for (e, mean) in result.enhancement_averages() {
        let _ = writeln!(
            out,
            "| {} | {} | {:.1} |",
            short(e),
            pct(mean),
            PUBLISHED_AVERAGE_ACCURACY[col(e)]
        );
    }
    let _ = writeln!(out);

    let others: Vec<EnhancementKind> = enh.iter().copied().filter(|&e| e != EnhancementKind::Original).collect();
    if enh.contains(&EnhancementKind::Original) && !others.is_empty() {
        let _ = writeln!(out, "## Accuracy change versus Orig (percentage points)\n");
        let mut head = String::from("| Model |");
        let mut rule = String::from("|---|");
        for &e in &others {
            let _ = write!(head, " {} desk |", short(e));
            rule.push_str("---:|");
        }
        for &e in &others {
            let _ = write!(head, " {} published |", short(e));
            rule.push_str("---:|");
        }
        let _ = writeln!(out, "{head}\n{rule}");
        for &m in &result.models {
            let mut line = format!("| {} |", m.display_name());
            let base = result.accuracy(m, EnhancementKind::Original);
            for &e in &others {
                let d = base.zip(result.accuracy(m, e)).map(|(b, x)| 100.0 * (x - b));
                let _ = write!(line, " {} |", d.map_or_else(|| "NA".to_string(), signed));
            }
            let p = &PUBLISHED[row(m)];
            for &e in &others {
                let _ = write!(line, " {} |", signed(p[col(e)] - p[0]));
            }
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out);
    }

    let _ = writeln!(out, "## Published full-scale results (%)\n");
    table_header(&mut out, "Model", &EnhancementKind::ALL);
    for (m, vals) in ModelKind::ALL.iter().zip(PUBLISHED.iter()) {
        let mut line = format!("| {} |", m.display_name());
        for v in vals {
            let _ = write!(line, " {v:.1} |");
        }
        let _ = writeln!(out, "{line}");
    }

    let failures: Vec<String> = result
        .cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().err().map(|e| format!("- {}/{}: {e}", c.model.display_name(), short(c.enhancement))))
        .collect();
    if !failures.is_empty() {
        let _ = writeln!(out, "\n## Failed cells\n\n{}", failures.join("\n"));
    }
    out
}
