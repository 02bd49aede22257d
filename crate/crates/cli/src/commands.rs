use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mammo_core::data::{build_dataset, ingest_dir, resize_bilinear, DataError, Label, Split};
use mammo_core::enhance::{enhance as apply_enhancement, EnhancementKind};
use mammo_core::ensemble::{
    calibrate_weights, checkpoint_name, normalize_weights, Ensemble, EnsembleError, Member, ModelMember, Tier,
};
use mammo_core::eval::{confusion, metrics, metrics_csv_row, roc_auc, METRICS_CSV_HEADER};
use mammo_core::grid::{render_report, run_grid, GridError, GridResult, GridSpec};
use mammo_core::image::{ImageError, ImageGray};
use mammo_core::models::{load_checkpoint, save_checkpoint, CheckpointError, ModelKind};
use mammo_core::tensor::Tensor;
use mammo_core::train::{annotate, evaluate, prepare, train as fit, TrainError};
use mammo_core::xai::{explain as attribute, overlay, XaiError, XaiMethod};
use mammo_core::{Dataset, Model};
use serde_json::json;

use crate::config::{ConfigError, RunConfig};
use crate::output::{prepare_dir, write};

/// 2 for usage and config problems, 3 for I/O and checkpoints, 4 for
/// numerical failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::NonFinite { .. } => return 4,
                TrainError::Io(_) => return 3,
                _ => {}
            }
        }
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() || cause.is::<CheckpointError>() || cause.is::<ImageError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            if !matches!(e, DataError::Invalid(_)) {
                return 3;
            }
        }
        if let Some(EnsembleError::Checkpoint { .. } | EnsembleError::Metadata(_)) = cause.downcast_ref() {
            return 3;
        }
        if let Some(GridError::Io(_) | GridError::Json(_)) = cause.downcast_ref() {
            return 3;
        }
        if let Some(XaiError::Io(_)) = cause.downcast_ref() {
            return 3;
        }
    }
    2
}

fn load_dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    Ok(match data {
        Some(dir) => Dataset::import(dir, cfg.dataset.seed, cfg.dataset.split)
            .with_context(|| format!("loading dataset from {}", dir.display()))?,
        None => build_dataset(&cfg.dataset)?,
    })
}

pub fn gen_data(mut cfg: RunConfig, out: &Path, per_class: Option<usize>, seed: Option<u64>) -> Result<()> {
    if let Some(n) = per_class {
        cfg.dataset.benign = n;
        cfg.dataset.malignant = n;
    }
    if let Some(s) = seed {
        cfg.seed = Some(s);
    }
    let cfg = cfg.resolved()?;
    let ds = build_dataset(&cfg.dataset)?;
    prepare_dir(out, &cfg)?;
    ds.export(out)?;
    let counts = |s| ds.class_counts(s);
    println!(
        "{} images (train {:?}, val {:?}, test {:?} benign/malignant) fingerprint {}",
        ds.len(),
        counts(Split::Train),
        counts(Split::Val),
        counts(Split::Test),
        ds.fingerprint()
    );
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("pgm" | "png")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

pub fn enhance(cfg: &RunConfig, input: &Path, kind: EnhancementKind, out: &Path) -> Result<()> {
    let files = if input.is_dir() {
        image_files(input)?
    } else if !input.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{}: no such file or directory", input.display())).into());
    } else {
        vec![input.to_path_buf()]
    };
    prepare_dir(out, cfg)?;
    for f in &files {
        let img = ImageGray::load(f)?;
        let enhanced = apply_enhancement(&img, kind, &cfg.enhance).map_err(|e| ConfigError(format!("{}: {e}", f.display())))?;
        enhanced.save(&out.join(format!("{}.pgm", stem(f))))?;
    }
    println!("{} image(s) enhanced with {kind}", files.len());
    Ok(())
}

pub fn train(cfg: &RunConfig, kind: ModelKind, enhancement: EnhancementKind, data: Option<&Path>, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg, data)?;
    let model_cfg = cfg.model_config(kind)?;
    let prepared = prepare(&ds, enhancement, &cfg.enhance, model_cfg.input_side).map_err(|e| ConfigError(e.to_string()))?;
    prepare_dir(out, cfg)?;
    let model = Model::build(kind, &model_cfg).map_err(|e| ConfigError(e.to_string()))?;
    let (mut best, history) = fit(model, &prepared, &cfg.train)?;
    annotate(&mut best, &prepared, &history);
    let ckpt = out.join(checkpoint_name(kind, enhancement));
    save_checkpoint(&best, &ckpt)?;
    history.write_csv(&out.join("history.csv"))?;
    let test = evaluate(&best, &prepared.test, cfg.train.batch_size)?;
    let cm = confusion(&test.preds, &prepared.test.labels)?;
    let m = metrics(&cm);
    let auc = roc_auc(&test.probs, &prepared.test.labels).ok().map(|r| r.auc);
    let csv = format!("{METRICS_CSV_HEADER}\n{}\n", metrics_csv_row(kind.as_str(), enhancement.as_str(), &m, auc));
    write(&out.join("metrics.csv"), &csv)?;
    println!(
        "{kind}/{enhancement}: best epoch {} val acc {:.4} test acc {:.4} -> {}",
        history.best_epoch,
        history.best_val_accuracy,
        test.accuracy,
        ckpt.display()
    );
    Ok(())
}

pub fn grid(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    models: Option<Vec<ModelKind>>,
    enhancements: Option<Vec<EnhancementKind>>,
) -> Result<()> {
    let ds = load_dataset(cfg, data)?;
    let models = models.unwrap_or_else(|| ModelKind::ALL.to_vec());
    let spec = GridSpec {
        models: models
            .iter()
            .map(|&k| Ok((k, cfg.model_config(k)?)))
            .collect::<Result<_>>()?,
        enhancements: enhancements.unwrap_or_else(|| EnhancementKind::ALL.to_vec()),
        enhance: cfg.enhance.clone(),
        train: cfg.train.clone(),
        side: cfg.model.input_side,
    };
    prepare_dir(out, cfg)?;
    let result = run_grid(&ds, &spec, Some(&out.join("checkpoints")))?;
    result.save_json(&out.join("grid.json"))?;
    write(&out.join("grid.csv"), &result.to_csv())?;
    write(&out.join("report.md"), &render_report(&result))?;
    let failed = result.cells.iter().filter(|c| c.outcome.is_err()).count();
    println!("{} cells, {failed} failed; report at {}", result.cells.len(), out.join("report.md").display());
    Ok(())
}

pub fn report(grid: &Path, out: Option<&Path>) -> Result<()> {
    let result = GridResult::load_json(grid).with_context(|| format!("loading {}", grid.display()))?;
    let text = render_report(&result);
    match out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_methods(spec: &str, kind: ModelKind) -> Result<Vec<XaiMethod>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        let mut all = vec![
            XaiMethod::IntegratedGradients,
            XaiMethod::GuidedGradCam,
            XaiMethod::Occlusion,
            XaiMethod::DeepLift,
            XaiMethod::Saliency,
        ];
        if kind.has_attention() {
            all.push(XaiMethod::AttentionMap);
        }
        return Ok(all);
    }
    spec.split(',')
        .map(|s| s.trim().parse::<XaiMethod>().map_err(|e| ConfigError(e.to_string()).into()))
        .collect()
}

pub fn explain(
    cfg: RunConfig,
    checkpoint: &Path,
    image: &Path,
    methods: &str,
    target: Option<usize>,
    out: &Path,
) -> Result<()> {
    let model = load_checkpoint::<f32>(checkpoint, None).with_context(|| format!("loading {}", checkpoint.display()))?;
    let kind = model.kind();
    let methods = parse_methods(methods, kind)?;
    let member = ModelMember::from_model(model, cfg.enhance.clone())?;
    let img = ImageGray::load(image)?;
    let x = member.input(&img).map_err(|e| ConfigError(e.to_string()))?;
    let x64 = Tensor::<f64>::from_f64(x.shape(), &x.to_f64_vec())?;
    let model64 = member.model.cast::<f64>();
    let side = member.model.config().input_side;

    let mut xai = cfg.xai.clone();
    if let Some(t) = target {
        xai.target_class = t;
    }
    if xai.black_level.is_none() {
        xai.black_level = Some(-member.stats.mean / member.stats.std);
    }
    let mut resolved = cfg.clone();
    resolved.xai = xai.clone();
    prepare_dir(out, &resolved)?;

    let background = ImageGray::new(
        side,
        side,
        resize_bilinear(&img, side, side).into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    )?;
    background.save(&out.join("input.png"))?;
    let mut written = Vec::new();
    for m in &methods {
        xai.method = *m;
        let map = attribute(&model64, &x64, &xai).with_context(|| format!("method {m}"))?;
        let name = m.as_str();
        overlay(&background, &map)?
            .save(out.join(format!("{name}.png")))
            .with_context(|| format!("writing {name}.png"))?;
        map.write_raw(&out.join(format!("{name}.raw")))?;
        written.push(name);
    }
    let p = member.malignant_prob(&img)?;
    let summary = json!({
        "model": kind.as_str(),
        "enhancement": member.enhancement.as_str(),
        "target_class": xai.target_class,
        "malignant_prob": p,
        "methods": written,
    });
    write(&out.join("explain.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("{} map(s) for {kind} written to {}", written.len(), out.display());
    Ok(())
}

pub fn ensemble(cfg: &RunConfig, input: &Path, checkpoints: &Path, out: &Path) -> Result<()> {
    let ens = &cfg.ensemble;
    let members: Vec<ModelMember> = ens
        .members
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let path = spec.checkpoint_in(checkpoints);
            let name = format!("member {i} ({}/{})", spec.model.as_str(), spec.enhancement.as_str());
            let m = ModelMember::load(&path, Some(spec.model), cfg.enhance.clone()).with_context(|| name.clone())?;
            if m.enhancement != spec.enhancement {
                return Err(ConfigError(format!(
                    "{name}: checkpoint was trained on {}, config says {}",
                    m.enhancement, spec.enhancement
                ))
                .into());
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let dyn_members: Vec<&dyn Member> = members.iter().map(|m| m as &dyn Member).collect();
    let weights = match &ens.weights {
        Some(w) => w.clone(),
        None => match members.iter().map(|m| m.val_accuracy()).collect::<Option<Vec<f64>>>() {
            Some(accs) => normalize_weights(&accs).map_err(|e| ConfigError(e.to_string()))?,
            None => {
                log::info!("calibrating weights on the configured validation split");
                let ds = build_dataset(&cfg.dataset)?;
                calibrate_weights(&dyn_members, &ds.val)?
            }
        },
    };
    let engine = Ensemble::new(dyn_members, weights, ens).map_err(|e| ConfigError(e.to_string()))?;

    let labeled = input.join(Label::Benign.as_str()).is_dir() || input.join(Label::Malignant.as_str()).is_dir();
    let items: Vec<(String, ImageGray, Option<Label>)> = if labeled {
        let (imgs, skipped) = ingest_dir(input)?;
        if skipped > 0 {
            log::warn!("{skipped} undecodable file(s) skipped");
        }
        imgs.into_iter().map(|i| (i.id, i.image, Some(i.label))).collect()
    } else {
        image_files(input)?
            .iter()
            .map(|f| Ok((stem(f), ImageGray::load(f)?, None)))
            .collect::<Result<_>>()?
    };
    if items.is_empty() {
        return Err(ConfigError(format!("no images found in {}", input.display())).into());
    }

    prepare_dir(out, cfg)?;
    let mut lines = String::new();
    let (mut primary, mut flagged) = (0usize, 0usize);
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for (id, img, label) in &items {
        let d = engine.predict(id, img)?;
        primary += usize::from(d.tier == Tier::Primary);
        flagged += usize::from(d.flagged);
        if let Some(l) = label {
            preds.push(d.label.index());
            labels.push(l.index());
        }
        lines.push_str(&d.to_json_line());
        lines.push('\n');
    }
    write(&out.join("decisions.jsonl"), &lines)?;
    let n = items.len();
    let mut summary = json!({
        "images": n,
        "weights": engine.weights(),
        "tier1_short_circuit": primary,
        "tier1_short_circuit_rate": primary as f64 / n as f64,
        "escalated": n - primary,
        "flagged": flagged,
        "flag_rate": flagged as f64 / n as f64,
        "member_invocations": engine.invocations(),
    });
    if !labels.is_empty() {
        let cm = confusion(&preds, &labels)?;
        summary["confusion"] = serde_json::to_value(cm)?;
        summary["metrics"] = serde_json::to_value(metrics(&cm))?;
    }
    write(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{n} image(s): {primary} decided by the primary model, {flagged} flagged for review -> {}",
        out.display()
    );
    Ok(())
}
