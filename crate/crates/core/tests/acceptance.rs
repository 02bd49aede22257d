//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! A red criterion is printed but does not fail the process unless
//! `MAMMO_ACCEPTANCE_STRICT=1`. `MAMMO_ACCEPTANCE_FULL_GRID=1` trains the
//! whole 28-cell grid at the default configuration for criterion 7 instead
//! of the four trend cells plus a reduced-scale 28-cell grid.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use common::oracles::{global_he, reference_hog};
use common::{case, randn, random_image, rng, small_config, EPS, FLOOR, PRIMITIVES};
use mammo_core::data::{build_dataset, DatasetConfig, Label};
use mammo_core::enhance::{ahe, hog_descriptor, negative, AheParams, EnhanceConfig, HogParams};
use mammo_core::ensemble::{checkpoint_name, fuse, Ensemble, EnsembleConfig, EnsembleError, Member, Tier};
use mammo_core::eval::{confusion, metrics, roc_auc, ConfusionMatrix};
use mammo_core::grid::{render_report, run_grid, GridResult, GridSpec};
use mammo_core::models::checkpoint::{from_bytes, to_bytes, CheckpointError};
use mammo_core::models::{load_checkpoint, save_checkpoint, Forward, Model};
use mammo_core::tensor::{primitive_grad_error, Graph, Tensor, Var};
use mammo_core::train::{cross_entropy, lr_schedule, prepare, train, TrainConfig};
use mammo_core::xai::{deeplift, integrated_gradients, occlusion, Scorer, XaiError};
use mammo_core::{Dataset, EnhancementKind, ImageGray, ModelConfig, ModelKind};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1

fn probe_for(c: &common::Case, seed: u64) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<_> = c.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = g.apply(c.prim.clone(), &vars).unwrap();
    let shape = g.shape(y).to_vec();
    randn(&mut rng(seed ^ 0x9e37_79b9), &shape, 1.0)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut prim_worst = (0.0f64, "");
    for name in PRIMITIVES {
        for seed in 0..100u64 {
            let c = case(name, seed);
            let probe = probe_for(&c, seed);
            let err = primitive_grad_error(&c.prim, &c.inputs, &c.differentiate, &probe, EPS, FLOOR)
                .map_err(|e| format!("{name} seed {seed}: {e}"))?;
            if err > prim_worst.0 {
                prim_worst = (err, name);
            }
        }
    }
    let mut model_worst = Vec::new();
    for kind in ModelKind::ALL {
        let worst = (0..3).map(|s| common::model_grad_error::<f32>(kind, s, 3)).fold(0.0, f64::max);
        model_worst.push((kind, worst));
    }
    let elapsed = start.elapsed();
    let failing: Vec<String> = model_worst
        .iter()
        .filter(|(_, e)| *e >= 1e-3)
        .map(|(k, e)| format!("{k} {e:.1e}"))
        .collect();
    let overall = model_worst.iter().map(|p| p.1).fold(0.0, f64::max);
    let detail = format!(
        "{} primitives x 100 seeds max {:.1e} ({}); 7 f32 models x 3 seeds max {:.1e}{}; {}",
        PRIMITIVES.len(),
        prim_worst.0,
        prim_worst.1,
        overall,
        if failing.is_empty() {
            String::new()
        } else {
            format!(" [over 1e-3: {}]", failing.join(", "))
        },
        secs(elapsed)
    );
    check(prim_worst.0 < 1e-3 && failing.is_empty() && elapsed < Duration::from_secs(120), detail)
}

// ---------------------------------------------------------------- 2

/// `F_1(x) = w·x + b`, `F_0 = 0`.
struct Linear {
    w: Vec<f64>,
    b: f64,
}

impl Scorer<f64> for Linear {
    fn record(&self, g: &mut Graph<f64>, x: Var) -> Result<Forward, XaiError> {
        let s = g.shape(x).to_vec();
        let n = s[1] * s[2] * s[3];
        let flat = g.reshape(x, &[s[0], n])?;
        let mut wd = vec![0.0; n * 2];
        for i in 0..n {
            wd[i * 2 + 1] = self.w[i];
        }
        let wv = g.constant(Tensor::from_f64(&[n, 2], &wd)?);
        let out = g.matmul(flat, wv)?;
        let bias = g.constant(Tensor::from_f64(&[2], &[0.0, self.b])?);
        let logits = g.add(out, bias)?;
        Ok(Forward {
            logits,
            hook: x,
            hook_name: "input".into(),
            attention: vec![],
        })
    }
}

fn ig_axioms(desk: &Desk) -> Outcome {
    let model: Model<f64> = desk.base_cnn.as_ref().map_err(Clone::clone)?.cast();
    let data = &desk.original;
    let black = -data.stats.mean / data.stats.std;
    let f = |t: &Tensor<f64>| model.predict(t).unwrap().data()[1];

    // the test split is ordered by class: sample evenly across it
    let n = data.test.len();
    let stride = (n / 20).max(1);
    let order = (0..n).step_by(stride).chain((0..n).filter(|i| i % stride != 0));
    let (mut used, mut ig_worst, mut dl_worst) = (0, 0.0f64, 0.0f64);
    for x in order.map(|i| &data.test.inputs[i]) {
        if used == 20 {
            break;
        }
        let x: Tensor<f64> = x.cast::<f64>().reshaped(&[1, 1, data.side, data.side]).unwrap();
        let base = Tensor::full(x.shape(), black);
        let delta = f(&x) - f(&base);
        if delta.abs() <= 1e-3 {
            continue;
        }
        used += 1;
        let ig = integrated_gradients(&model, &x, &base, 256, 1).map_err(|e| e.to_string())?;
        ig_worst = ig_worst.max((ig.sum() - delta).abs() / delta.abs());
        let dl = deeplift(&model, &x, &base, 1, false).map_err(|e| e.to_string())?;
        dl_worst = dl_worst.max((dl.sum() - delta).abs() / delta.abs());
    }

    let mut lin_worst = 0.0f64;
    for seed in 0..20 {
        let r = &mut rng(500 + seed);
        let side = r.gen_range(2..12);
        let w: Vec<f64> = (0..side * side).map(|_| r.gen_range(-2.0..2.0)).collect();
        let x = randn(r, &[1, 1, side, side], 1.0);
        let base = randn(r, &[1, 1, side, side], 1.0);
        let m = r.gen_range(1..64);
        let lin = Linear { w: w.clone(), b: r.gen_range(-1.0..1.0) };
        let a = integrated_gradients(&lin, &x, &base, m, 1).map_err(|e| e.to_string())?;
        for (i, v) in a.values.iter().enumerate() {
            lin_worst = lin_worst.max((v - (x.data()[i] - base.data()[i]) * w[i]).abs());
        }
    }

    let mut zero = true;
    for x in data.test.inputs.iter().take(5) {
        let x: Tensor<f64> = x.cast::<f64>().reshaped(&[1, 1, data.side, data.side]).unwrap();
        zero &= integrated_gradients(&model, &x, &x, 16, 1).map_err(|e| e.to_string())?.values.iter().all(|&v| v == 0.0);
        zero &= deeplift(&model, &x, &x, 1, false).map_err(|e| e.to_string())?.values.iter().all(|&v| v == 0.0);
    }

    let detail = format!(
        "{used} images: IG m=256 completeness max {:.2e} rel, DeepLIFT max {:.1e} rel; linear max {:.1e}; zero at baseline {zero}",
        ig_worst, dl_worst, lin_worst
    );
    check(used == 20 && ig_worst <= 0.01 && dl_worst <= 1e-4 && lin_worst <= 1e-5 && zero, detail)
}

// ---------------------------------------------------------------- 3

fn occlusion_oracle(model: &Model<f32>, x: &Tensor<f32>, class: usize, patch: usize, stride: usize, fill: f32) -> Vec<f64> {
    let side = x.shape()[2];
    let base = model.predict(x).unwrap().data()[class] as f64;
    let mut acc = vec![0.0f64; side * side];
    let mut n = vec![0u32; side * side];
    for py in (0..=side - patch).step_by(stride) {
        for px in (0..=side - patch).step_by(stride) {
            let mut xm = x.clone();
            for y in py..py + patch {
                for xx in px..px + patch {
                    xm.data_mut()[y * side + xx] = fill;
                }
            }
            let d = base - model.predict(&xm).unwrap().data()[class] as f64;
            for y in py..py + patch {
                for xx in px..px + patch {
                    acc[y * side + xx] += d;
                    n[y * side + xx] += 1;
                }
            }
        }
    }
    acc.iter().zip(&n).map(|(a, &c)| if c == 0 { 0.0 } else { a / c as f64 }).collect()
}

fn occlusion_oracle_check() -> Outcome {
    let mut equal = 0;
    let mut bad = Vec::new();
    for i in 0..10u64 {
        let kind = ModelKind::ALL[i as usize % 7];
        let r = &mut rng(900 + i);
        let patch = r.gen_range(4..=12);
        let stride = r.gen_range(2..=patch);
        let class = r.gen_range(0..2);
        let fill = r.gen_range(-1.0f32..1.0);
        let model = Model::<f32>::build(kind, &small_config(kind, 60 + i)).unwrap();
        let x: Tensor<f32> = randn(r, &[1, 1, 32, 32], 1.0).cast();
        let got = occlusion(&model, &x, class, patch, stride, fill as f64).map_err(|e| e.to_string())?;
        if got.values == occlusion_oracle(&model, &x, class, patch, stride, fill) {
            equal += 1;
        } else {
            bad.push(format!("{kind} seed {i}"));
        }
    }
    check(equal == 10, format!("{equal}/10 (model, image) pairs bit-equal{}", if bad.is_empty() { String::new() } else { format!("; differ: {}", bad.join(", ")) }))
}

// ---------------------------------------------------------------- 4

fn enhancement_oracles() -> Outcome {
    let mut r = rng(4);
    let involution = (0..1000u64).all(|s| {
        let img = random_image(s, r.gen_range(1..40), r.gen_range(1..40));
        negative(&negative(&img)) == img
    });

    let p = HogParams::default();
    let mut hog_worst = 0.0f64;
    for seed in 0..50 {
        let img = random_image(1000 + seed, 32, 32);
        let d = hog_descriptor(&img, &p).map_err(|e| e.to_string())?;
        let refd = reference_hog(&img, 8, 2, 9);
        if d.values.len() != refd.len() {
            return Err(format!("HOG length {} vs reference {}", d.values.len(), refd.len()));
        }
        for (a, b) in d.values.iter().zip(&refd) {
            hog_worst = hog_worst.max((a - b).abs());
        }
    }

    let global = AheParams {
        tile_grid: (1, 1),
        clip_limit: f64::INFINITY,
        bins: 256,
    };
    let mut he_equal = 0;
    for seed in 0..50 {
        let mut r = rng(2000 + seed);
        let (lo, hi): (u8, u8) = (r.gen_range(0..120), r.gen_range(130..=255));
        let img = ImageGray::from_fn(r.gen_range(8..50), r.gen_range(8..50), |_, _| r.gen_range(lo..=hi));
        he_equal += (ahe(&img, &global).map_err(|e| e.to_string())? == global_he(&img)) as usize;
    }

    let mut fixed = true;
    for v in (0..=255u8).step_by(5) {
        for (w, h) in [(8, 8), (31, 17), (64, 64), (69, 40)] {
            let img = ImageGray::filled(w, h, v);
            fixed &= ahe(&img, &AheParams::default()).map_err(|e| e.to_string())? == img;
        }
    }

    check(
        involution && hog_worst <= 1e-6 && he_equal == 50 && fixed,
        format!("negative involution on 1000: {involution}; HOG vs reference max {hog_worst:.1e} on 50; 1x1 unclipped AHE = global HE {he_equal}/50; constant fixed points {fixed}"),
    )
}

// ---------------------------------------------------------------- 5

fn training_recipe() -> Outcome {
    let cfg = TrainConfig::default();
    let want = |t: usize| match t {
        0..=6 => 0.001,
        7..=13 => 0.0001,
        _ => 0.00001,
    };
    let schedule = (0..21).all(|t| lr_schedule(t, &cfg) == want(t));

    let mut ce_worst = 0.0f64;
    for b in 1..6 {
        let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[b, 2]));
        let l = cross_entropy(&mut g, x, &labels, None).map_err(|e| e.to_string())?;
        ce_worst = ce_worst.max((g.value(l).data()[0] as f64 - 2f64.ln()).abs());
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[b, 2]));
        let l = cross_entropy(&mut g, x, &labels, None).map_err(|e| e.to_string())?;
        ce_worst = ce_worst.max((g.value(l).data()[0] - 2f64.ln()).abs());
    }

    let ds = build_dataset(&DatasetConfig {
        benign: 16,
        malignant: 16,
        seed: 9,
        ..DatasetConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let data = prepare(&ds, EnhancementKind::Original, &EnhanceConfig::default(), 32).map_err(|e| e.to_string())?;
    let quick = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut identical = true;
    for kind in [ModelKind::BaseCnn, ModelKind::VitLite] {
        let m = Model::<f32>::build(kind, &small_config(kind, 1)).unwrap();
        let (a, ha) = train(m.clone(), &data, &quick).map_err(|e| e.to_string())?;
        let (b, hb) = train(m, &data, &quick).map_err(|e| e.to_string())?;
        identical &= ha == hb && ha.to_csv() == hb.to_csv() && a == b;
    }

    check(
        schedule && ce_worst <= 1e-6 && identical,
        format!("schedule exact over t<21: {schedule}; CE at uniform logits |err| max {ce_worst:.1e}; identical seeded histories (BaseCNN, ViTLite): {identical}"),
    )
}

// ---------------------------------------------------------------- 6

/// Default dataset, its Original preparation, and the desk-scale CNN run.
struct Desk {
    ds: Dataset,
    original: mammo_core::train::PreparedData,
    cnn_grid: Result<GridResult, String>,
    cnn_time: Duration,
    base_cnn: Result<Model<f32>, String>,
}

fn desk() -> Desk {
    let ds = build_dataset(&DatasetConfig::default()).expect("default dataset");
    let original = prepare(&ds, EnhancementKind::Original, &EnhanceConfig::default(), 64).expect("prepare");
    let mut spec = GridSpec::full(64, 42, TrainConfig::default());
    spec.models.retain(|(k, _)| matches!(k, ModelKind::BaseCnn | ModelKind::ResNetLite));
    spec.enhancements = vec![EnhancementKind::Original];
    let dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let cnn_grid = run_grid(&ds, &spec, Some(dir.path())).map_err(|e| e.to_string());
    let cnn_time = start.elapsed();
    let base_cnn = load_checkpoint::<f32>(
        &dir.path().join(checkpoint_name(ModelKind::BaseCnn, EnhancementKind::Original)),
        Some(ModelKind::BaseCnn),
    )
    .map_err(|e| e.to_string());
    Desk {
        ds,
        original,
        cnn_grid,
        cnn_time,
        base_cnn,
    }
}

fn desk_run(desk: &Desk) -> Outcome {
    let g = desk.cnn_grid.as_ref().map_err(Clone::clone)?;
    let sizes = (desk.ds.train.len(), desk.ds.val.len(), desk.ds.test.len());
    let mut ok = sizes == (420, 90, 90) && desk.cnn_time < Duration::from_secs(600);
    let mut parts = vec![format!("splits {sizes:?}")];
    for kind in [ModelKind::BaseCnn, ModelKind::ResNetLite] {
        match g.accuracy(kind, EnhancementKind::Original) {
            Some(acc) => {
                ok &= acc >= 0.95;
                parts.push(format!("{kind} {:.1}%", 100.0 * acc));
            }
            None => {
                ok = false;
                parts.push(format!("{kind} failed"));
            }
        }
    }
    parts.push(format!(
        "10 epochs, {} on {} thread(s)",
        secs(desk.cnn_time),
        rayon::current_num_threads()
    ));
    check(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 7

fn report_table<'a>(report: &'a str, title: &str) -> Vec<Vec<&'a str>> {
    report
        .split(title)
        .nth(1)
        .unwrap_or("")
        .lines()
        .skip_while(|l| !l.starts_with('|'))
        .take_while(|l| l.starts_with('|'))
        .map(|l| l.trim_matches('|').split('|').map(str::trim).collect())
        .collect()
}

/// All 28 cells present and numeric, published-table column layout, averages row
/// and per-enhancement averages consistent with the cells.
fn table_shape(g: &GridResult) -> Result<(), String> {
    let report = render_report(g);
    let table = report_table(&report, "## Desk-scale results (%)");
    if table.len() != 10 {
        return Err(format!("results table has {} rows", table.len()));
    }
    let groups = ["Acc", "Prec", "Rec", "F1"];
    let enh = ["Orig", "Neg", "AHE", "HOG"];
    let want: Vec<String> = groups.iter().flat_map(|g| enh.iter().map(move |e| format!("{g} {e}"))).collect();
    if table[0][1..] != want.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(format!("header {:?}", table[0]));
    }
    for (row, kind) in table[2..9].iter().zip(ModelKind::ALL) {
        if row[0] != kind.display_name() || row.len() != 17 {
            return Err(format!("row {row:?}"));
        }
        for (j, e) in EnhancementKind::ALL.iter().enumerate() {
            let acc = g.accuracy(kind, *e).ok_or_else(|| format!("{kind}/{e} missing"))?;
            if row[1 + j] != format!("{:.1}", 100.0 * acc) {
                return Err(format!("{kind}/{e}: {} vs {acc}", row[1 + j]));
            }
        }
    }
    if table[9][0] != "Average" {
        return Err("no average row".into());
    }
    let averages = report_table(&report, "## Average accuracy by enhancement (%)");
    if averages.len() != 6 {
        return Err(format!("averages table has {} rows", averages.len()));
    }
    for (j, e) in EnhancementKind::ALL.iter().enumerate() {
        let mean = ModelKind::ALL.iter().map(|&m| g.accuracy(m, *e).unwrap()).sum::<f64>() / 7.0;
        let cell = format!("{:.1}", 100.0 * mean);
        if table[9][1 + j] != cell || averages[2 + j][1] != cell {
            return Err(format!("{e} average {cell} not rendered"));
        }
    }
    if report.contains("Failed cells") {
        return Err("failed cells".into());
    }
    Ok(())
}

fn trend(desk: &Desk) -> Outcome {
    let full = std::env::var("MAMMO_ACCEPTANCE_FULL_GRID").is_ok_and(|v| v == "1");
    let start = Instant::now();
    let mut spec = GridSpec::full(64, 42, TrainConfig::default());
    if !full {
        spec.models.retain(|(k, _)| matches!(k, ModelKind::VitLite | ModelKind::SwinLite));
        spec.enhancements = vec![EnhancementKind::Original, EnhancementKind::Hog];
    }
    let g = run_grid(&desk.ds, &spec, None).map_err(|e| e.to_string())?;
    let trend_time = start.elapsed();
    let acc = |m, e| g.accuracy(m, e).ok_or_else(|| format!("{m}/{e} failed"));
    let (vo, vh) = (acc(ModelKind::VitLite, EnhancementKind::Original)?, acc(ModelKind::VitLite, EnhancementKind::Hog)?);
    let (so, sh) = (acc(ModelKind::SwinLite, EnhancementKind::Original)?, acc(ModelKind::SwinLite, EnhancementKind::Hog)?);

    let (shape, shape_note) = if full {
        (table_shape(&g), "default-scale 28-cell grid".to_string())
    } else {
        // every cell really trained, at a size that fits the test budget
        let small = build_dataset(&DatasetConfig {
            benign: 20,
            malignant: 20,
            ..DatasetConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let reduced = GridSpec::full(
            32,
            42,
            TrainConfig {
                epochs: 1,
                batch_size: 8,
                ..TrainConfig::default()
            },
        );
        let rg = run_grid(&small, &reduced, None).map_err(|e| e.to_string())?;
        (table_shape(&rg), format!("reduced 28-cell grid ({} cells, 32x32, 1 epoch)", rg.cells.len()))
    };
    let detail = format!(
        "ViTLite Orig {:.1}% -> HOG {:.1}% ({:+.1}); SwinLite Orig {:.1}% -> HOG {:.1}% ({:+.1}; published full-scale +13.0) in {}; {}: {}",
        100.0 * vo,
        100.0 * vh,
        100.0 * (vh - vo),
        100.0 * so,
        100.0 * sh,
        100.0 * (sh - so),
        secs(trend_time),
        shape_note,
        match &shape {
            Ok(()) => "published-table shape with averages".to_string(),
            Err(e) => e.clone(),
        }
    );
    check(vh >= vo && sh >= so && shape.is_ok(), detail)
}

// ---------------------------------------------------------------- 8

/// Probability that a random positive outscores a random negative, ties ½.
fn mann_whitney(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn metrics_oracle() -> Outcome {
    let cm = |tp, fp, tn, fn_| ConfusionMatrix { tp, fp, tn, fn_ };
    let mut fixtures = Vec::new();
    let labels: Vec<usize> = [1; 4].into_iter().chain([0; 6]).collect();
    fixtures.push(confusion(&labels, &labels) == Ok(cm(4, 0, 6, 0)));
    fixtures.push(confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]) == Ok(cm(1, 1, 1, 1)));
    let m = metrics(&cm(1, 1, 1, 1));
    fixtures.push([m.accuracy, m.precision, m.recall, m.f1] == [Some(0.5); 4]);
    let m = metrics(&cm(3, 0, 5, 0));
    fixtures.push([m.accuracy, m.precision, m.recall, m.f1] == [Some(1.0); 4]);
    let m = metrics(&cm(0, 0, 5, 2));
    fixtures.push(m.precision.is_none() && m.recall == Some(0.0) && m.f1.is_none());
    let m = metrics(&cm(7, 3, 4, 2));
    fixtures.push((m.f1.unwrap() - 2.0 / (1.0 / 0.7 + 9.0 / 7.0)).abs() < 1e-15);
    fixtures.push(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).map(|r| r.auc) == Ok(1.0));
    fixtures.push(roc_auc(&[0.3; 5], &[0, 1, 1, 0, 1]).map(|r| r.auc) == Ok(0.5));
    let six = roc_auc(&[0.1, 0.4, 0.35, 0.8, 0.7, 0.4], &[0, 0, 1, 1, 0, 1]).map_err(|e| e.to_string())?;
    fixtures.push((six.auc - 5.5 / 9.0).abs() < 1e-12);
    let fixtures_ok = fixtures.iter().filter(|&&b| b).count();

    let mut worst = 0.0f64;
    for seed in 0..100 {
        let r = &mut rng(3000 + seed);
        let n = r.gen_range(2..80);
        let mut labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse levels force ties
        let levels = r.gen_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?.auc;
        worst = worst.max((auc - mann_whitney(&scores, &labels)).abs());
    }
    check(
        fixtures_ok == fixtures.len() && worst < 1e-9,
        format!("{fixtures_ok}/{} fixtures; AUC vs rank statistic max {worst:.1e} on 100 sets", fixtures.len()),
    )
}

// ---------------------------------------------------------------- 9

struct Fixed {
    p: Option<f64>,
    calls: AtomicUsize,
}

impl Fixed {
    fn new(p: f64) -> Self {
        Self {
            p: Some(p),
            calls: AtomicUsize::new(0),
        }
    }
    fn pixel() -> Self {
        Self {
            p: None,
            calls: AtomicUsize::new(0),
        }
    }
}

impl Member for Fixed {
    fn malignant_prob(&self, img: &ImageGray) -> Result<f64, EnsembleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.p.unwrap_or_else(|| img.pixels()[0] as f64 / 255.0))
    }
}

fn ensemble_logic() -> Outcome {
    let cfg = EnsembleConfig::default();
    let img = ImageGray::filled(4, 4, 0);

    let mut single = true;
    for px in 0..=255u8 {
        let m = Fixed::pixel();
        let e = Ensemble::new(vec![&m as &dyn Member], vec![0.1 + px as f64 / 7.0], &cfg).map_err(|e| e.to_string())?;
        let d = e.predict("s", &ImageGray::filled(2, 2, px)).map_err(|e| e.to_string())?;
        let p = px as f64 / 255.0;
        single &= d.fused_prob == p && !d.flagged && d.label == if p >= 0.5 { Label::Malignant } else { Label::Benign };
    }

    let (mut rescale, mut monotone) = (true, true);
    for seed in 0..200 {
        let r = &mut rng(4000 + seed);
        let n = r.gen_range(1..6);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..=1.0)).collect();
        let mut w: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..10.0)).collect();
        w[0] += 0.01;
        let c = 10f64.powf(r.gen_range(-3.0..3.0));
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let ((a, fa), (b, fb)) = (fuse(&p, &w, 0.3), fuse(&p, &scaled, 0.3));
        rescale &= (a - b).abs() < 1e-12 && fa == fb;
        let (t1, t2): (f64, f64) = (r.gen_range(0.01..=1.0), r.gen_range(0.01..=1.0));
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        monotone &= !fuse(&p, &w, hi).1 || fuse(&p, &w, lo).1;
    }

    let mut short_circuit = true;
    for p in [0.0, 0.05, 0.19, 0.81, 0.95, 1.0] {
        let ms = [Fixed::new(p), Fixed::new(0.0), Fixed::new(1.0)];
        let members: Vec<&dyn Member> = ms.iter().map(|m| m as &dyn Member).collect();
        let e = Ensemble::new(members, vec![1.0; 3], &cfg).map_err(|e| e.to_string())?;
        let d = e.predict("a", &img).map_err(|e| e.to_string())?;
        short_circuit &= d.tier == Tier::Primary
            && e.invocations() == vec![1, 0, 0]
            && ms[1].calls.load(Ordering::SeqCst) == 0
            && ms[2].calls.load(Ordering::SeqCst) == 0;
    }
    for p in [0.2, 0.5, 0.8] {
        let ms = [Fixed::new(p), Fixed::new(p), Fixed::new(p)];
        let members: Vec<&dyn Member> = ms.iter().map(|m| m as &dyn Member).collect();
        let e = Ensemble::new(members, vec![1.0; 3], &cfg).map_err(|e| e.to_string())?;
        short_circuit &= e.predict("b", &img).map_err(|e| e.to_string())?.tier == Tier::FullEnsemble && e.invocations() == vec![1, 1, 1];
    }

    let ms = [Fixed::new(0.8), Fixed::new(0.3), Fixed::new(0.6)];
    let members: Vec<&dyn Member> = ms.iter().map(|m| m as &dyn Member).collect();
    let e = Ensemble::new(members, vec![1.0; 3], &cfg).map_err(|e| e.to_string())?;
    let d = e.predict("worked", &img).map_err(|e| e.to_string())?;
    let worked = (d.fused_prob - 1.7 / 3.0).abs() < 1e-15 && d.flagged && d.label == Label::Malignant;

    check(
        single && rescale && monotone && short_circuit && worked,
        format!(
            "single-member {single}; rescaling invariance {rescale}; flag monotone {monotone}; tier-1 short-circuit by invocation count {short_circuit}; worked example fused {:.4} flagged {}",
            d.fused_prob, d.flagged
        ),
    )
}

// ---------------------------------------------------------------- 10

fn checkpoints() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut round = 0;
    for kind in ModelKind::ALL {
        let mut m = Model::<f32>::build(kind, &ModelConfig::default_for(kind)).map_err(|e| e.to_string())?;
        m.metadata.insert("enhancement".into(), "hog".into());
        let path = dir.path().join(format!("{}.ckpt", kind.as_str()));
        save_checkpoint(&m, &path).map_err(|e| e.to_string())?;
        let back = load_checkpoint::<f32>(&path, Some(kind)).map_err(|e| e.to_string())?;
        let bits = |m: &Model<f32>| -> Vec<(String, Vec<u32>)> {
            m.params().iter().map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect())).collect()
        };
        round += (bits(&back) == bits(&m) && back == m) as usize;
    }

    let bytes = to_bytes(&Model::<f32>::build(ModelKind::BaseCnn, &small_config(ModelKind::BaseCnn, 1)).unwrap());
    let mut header = bytes.clone();
    header[0] = b'X';
    let bad_magic = matches!(from_bytes::<f32>(&header, None), Err(CheckpointError::BadMagic));
    let step = (bytes.len() / 97).max(1);
    let cuts: Vec<usize> = (0..bytes.len()).step_by(step).chain([bytes.len() - 1]).collect();
    let truncated = cuts
        .iter()
        .filter(|&&c| matches!(from_bytes::<f32>(&bytes[..c], None), Err(CheckpointError::Truncated)))
        .count();
    let file = dir.path().join("cut.ckpt");
    std::fs::write(&file, &bytes[..bytes.len() / 2]).map_err(|e| e.to_string())?;
    let file_truncated = matches!(load_checkpoint::<f32>(&file, None), Err(CheckpointError::Truncated));
    check(
        round == 7 && bad_magic && truncated == cuts.len() && file_truncated,
        format!(
            "bit-identical round trip {round}/7; corrupted header BadMagic {bad_magic}; truncations Truncated {truncated}/{}; truncated file {file_truncated}",
            cuts.len()
        ),
    )
}

// ----------------------------------------------------------------

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (status, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {status} {name} [{}]: {detail}", secs(start.elapsed()));
    outcome.is_ok()
}

fn main() {
    let strict = std::env::var("MAMMO_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let started = Instant::now();
    let desk = catch_unwind(desk).map_err(|_| "desk-scale setup panicked".to_string());
    let desk = &desk;
    let with_desk = |f: fn(&Desk) -> Outcome| move || desk.as_ref().map_err(Clone::clone).and_then(f);

    let results = [
        run(1, "gradient correctness", gradients),
        run(2, "IG and DeepLIFT axioms", with_desk(ig_axioms)),
        run(3, "occlusion oracle", occlusion_oracle_check),
        run(4, "enhancement oracles", enhancement_oracles),
        run(5, "training recipe", training_recipe),
        run(6, "end-to-end desk run", with_desk(desk_run)),
        run(7, "directional trend and grid report", with_desk(trend)),
        run(8, "metrics oracle", metrics_oracle),
        run(9, "ensemble logic", ensemble_logic),
        run(10, "checkpoint round trip", checkpoints),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/10 PASS in {}", secs(started.elapsed()));
    if strict && passed < 10 {
        std::process::exit(1);
    }
}
