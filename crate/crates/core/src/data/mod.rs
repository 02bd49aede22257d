//! Synthetic lesion generation, augmentation, class balancing, splitting and
//! ingestion of image folders.

mod augment;
mod input;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{ImageError, ImageGray};
use crate::seed;

pub use augment::{augment, augment_from, AugmentationOp};
pub use input::{resize_bilinear, resize_bilinear_f64, to_model_input, NormStats};
pub use synth::{synth_background, synth_generate, BenignParams, MalignantParams, SynthParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("ingestion path {0} does not exist or is not a directory")]
    MissingPath(PathBuf),
    #[error("invalid dataset configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Malignant];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Benign),
            1 => Some(Self::Malignant),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Benign => "benign",
            Self::Malignant => "malignant",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "benign" | "0" => Ok(Self::Benign),
            "malignant" | "1" => Ok(Self::Malignant),
            other => Err(DataError::Manifest(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Ingested,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Ingested => "ingested",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub image: ImageGray,
    pub label: Label,
    pub source: Source,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(DataError::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Synthetic images generated per class (ignored when ingesting).
    pub benign: usize,
    pub malignant: usize,
    /// Read `<root>/{benign,malignant}/*.pgm|*.png` instead of generating.
    pub ingest_root: Option<PathBuf>,
    /// (train, val, test) fractions summing to 1.
    pub split: (f64, f64, f64),
    pub seed: u64,
    /// Augment the minority class until per-class counts match within each split.
    pub balance: bool,
    pub synth: SynthParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            benign: 300,
            malignant: 300,
            ingest_root: None,
            split: (0.7, 0.15, 0.15),
            seed: 42,
            balance: true,
            synth: SynthParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 || a <= 0.0 {
            return Err(DataError::Invalid(format!(
                "split fractions {:?} must be in [0, 1], sum to 1, with a nonzero train share",
                self.split
            )));
        }
        if self.ingest_root.is_none() {
            if self.benign < 2 || self.malignant < 2 {
                return Err(DataError::Invalid("need at least 2 images per class".into()));
            }
            self.synth.validate().map_err(DataError::Invalid)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub seed: u64,
    pub split_fracs: (f64, f64, f64),
    /// Files skipped during ingestion because they could not be decoded.
    pub skipped: usize,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[LabeledImage] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &LabeledImage)> {
        Split::ALL
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |i| (s, i)))
    }

    pub fn class_counts(&self, s: Split) -> [usize; 2] {
        let mut c = [0; 2];
        for img in self.split(s) {
            c[img.label.index()] += 1;
        }
        c
    }

    /// SHA-256 over split membership, labels and pixels, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (s, img) in self.iter() {
            h.update(s.as_str().as_bytes());
            h.update(img.id.as_bytes());
            h.update([img.label as u8]);
            h.update((img.image.width() as u32).to_le_bytes());
            h.update((img.image.height() as u32).to_le_bytes());
            h.update(img.image.pixels());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `manifest.csv` (id,label,source,split) plus one PGM per image
    /// under `<dir>/images/`.
    pub fn export(&self, dir: &Path) -> Result<(), DataError> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|source| DataError::Io {
            path: images.clone(),
            source,
        })?;
        for (_, img) in self.iter() {
            img.image.save(&images.join(format!("{}.pgm", img.id)))?;
        }
        self.write_manifest(&dir.join("manifest.csv"))
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Manifest(e.to_string()))?;
        let mut write = |rec: [&str; 4]| w.write_record(rec).map_err(|e| DataError::Manifest(e.to_string()));
        write(["id", "label", "source", "split"])?;
        for (s, img) in self.iter() {
            write([&img.id, img.label.as_str(), img.source.as_str(), s.as_str()])?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reloads a directory written by [`Dataset::export`].
    pub fn import(dir: &Path, seed: u64, split_fracs: (f64, f64, f64)) -> Result<Self, DataError> {
        let manifest = dir.join("manifest.csv");
        let mut r = csv::Reader::from_path(&manifest).map_err(|e| DataError::Manifest(format!("{}: {e}", manifest.display())))?;
        let mut ds = Dataset {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            seed,
            split_fracs,
            skipped: 0,
        };
        for rec in r.records() {
            let rec = rec.map_err(|e| DataError::Manifest(e.to_string()))?;
            if rec.len() != 4 {
                return Err(DataError::Manifest(format!("expected 4 columns, got {}", rec.len())));
            }
            let id = rec[0].to_string();
            let label: Label = rec[1].parse()?;
            let source = match &rec[2] {
                "synthetic" => Source::Synthetic,
                "ingested" => Source::Ingested,
                other => return Err(DataError::Manifest(format!("unknown source `{other}`"))),
            };
            let split: Split = rec[3].parse()?;
            let image = ImageGray::load(&dir.join("images").join(format!("{id}.pgm")))?;
            let item = LabeledImage { image, label, source, id };
            match split {
                Split::Train => ds.train.push(item),
                Split::Val => ds.val.push(item),
                Split::Test => ds.test.push(item),
            }
        }
        Ok(ds)
    }
}

const SPLIT_STREAM: u64 = 0x5b;
const AUG_STREAM: u64 = 0xa6;

/// Generates one class of synthetic images; per-image seeds derive from the
/// dataset seed, the class and the index.
pub fn synth_class(label: Label, count: usize, seed: u64, params: &SynthParams) -> Vec<LabeledImage> {
    (0..count)
        .into_par_iter()
        .map(|i| LabeledImage {
            image: synth_generate(label, seed::derive(seed, &[label as u64, i as u64]), params),
            label,
            source: Source::Synthetic,
            id: format!("syn_{}_{i:04}", label.as_str()),
        })
        .collect()
}

/// Reads `<root>/benign` and `<root>/malignant`; undecodable files are
/// skipped and counted.
pub fn ingest_dir(root: &Path) -> Result<(Vec<LabeledImage>, usize), DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingPath(root.to_path_buf()));
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for label in Label::ALL {
        let dir = root.join(label.as_str());
        if !dir.is_dir() {
            return Err(DataError::MissingPath(dir));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|source| DataError::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("pgm" | "png")
                )
            })
            .collect();
        files.sort();
        for path in files {
            match ImageGray::load(&path) {
                Ok(image) => {
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                    out.push(LabeledImage {
                        image,
                        label,
                        source: Source::Ingested,
                        id: format!("ing_{}_{stem}", label.as_str()),
                    });
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
    }
    Ok((out, skipped))
}

/// Per-class stratified split sizes: `round(n·f_train)`, `round(n·f_val)`,
/// remainder to test.
pub fn split_sizes(n: usize, fracs: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = ((n as f64 * fracs.0).round() as usize).clamp(1, n);
    let val = ((n as f64 * fracs.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Generates or ingests images, splits each class with the configured seed,
/// then augments the minority class inside each split until class counts
/// match. Augmented copies stay in their source's split.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let (all, skipped) = match &cfg.ingest_root {
        Some(root) => ingest_dir(root)?,
        None => {
            let mut v = synth_class(Label::Benign, cfg.benign, cfg.seed, &cfg.synth);
            v.extend(synth_class(Label::Malignant, cfg.malignant, cfg.seed, &cfg.synth));
            (v, 0)
        }
    };
    let mut by_class: BTreeMap<Label, Vec<LabeledImage>> = BTreeMap::new();
    for img in all {
        by_class.entry(img.label).or_default().push(img);
    }
    for label in Label::ALL {
        let n = by_class.get(&label).map_or(0, Vec::len);
        if n < 2 {
            return Err(DataError::Invalid(format!("class {label} has {n} images, need at least 2")));
        }
    }

    let mut splits: BTreeMap<Split, [Vec<LabeledImage>; 2]> = Split::ALL.iter().map(|&s| (s, [Vec::new(), Vec::new()])).collect();
    for (label, mut items) in by_class {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        items.shuffle(&mut seed::rng(cfg.seed, &[SPLIT_STREAM, label as u64]));
        let (tr, va, _) = split_sizes(items.len(), cfg.split);
        let mut rest = items.split_off(tr);
        let test = rest.split_off(va);
        splits.get_mut(&Split::Train).unwrap()[label.index()] = items;
        splits.get_mut(&Split::Val).unwrap()[label.index()] = rest;
        splits.get_mut(&Split::Test).unwrap()[label.index()] = test;
    }

    if cfg.balance {
        let pool = AugmentationOp::balancing_pool();
        for (&split, classes) in splits.iter_mut() {
            let (minority, majority) = if classes[0].len() < classes[1].len() { (0, 1) } else { (1, 0) };
            let deficit = classes[majority].len() - classes[minority].len();
            let sources = classes[minority].clone();
            if deficit == 0 || sources.is_empty() {
                continue;
            }
            let mut rng = seed::rng(cfg.seed, &[AUG_STREAM, split as u64]);
            let mut uses = vec![0usize; sources.len()];
            for i in 0..deficit {
                let s = i % sources.len();
                uses[s] += 1;
                let op = pool[rng.gen_range(0..pool.len())];
                classes[minority].extend(augment_from(&sources[s], &[op], uses[s]));
            }
        }
    }

    let mut take = |s: Split| -> Vec<LabeledImage> {
        let [a, b] = std::mem::take(splits.get_mut(&s).unwrap());
        let mut v: Vec<LabeledImage> = a.into_iter().chain(b).collect();
        v.sort_by(|x, y| x.id.cmp(&y.id));
        v
    };
    Ok(Dataset {
        train: take(Split::Train),
        val: take(Split::Val),
        test: take(Split::Test),
        seed: cfg.seed,
        split_fracs: cfg.split,
        skipped,
    })
}
