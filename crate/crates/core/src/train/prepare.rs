//! Enhancement and normalization of a dataset into model-ready inputs.

use rayon::prelude::*;

use crate::data::{to_model_input, Dataset, LabeledImage, NormStats, Split};
use crate::enhance::{enhance, EnhanceConfig, EnhanceError, EnhancementKind};
use crate::image::ImageGray;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One split as `[1, side, side]` inputs plus labels and ids.
#[derive(Debug, Clone, Default)]
pub struct PreparedSplit {
    pub inputs: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[B, 1, side, side]` batch of the given sample indices.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Tensor<S> {
        let items: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.inputs[i]).collect();
        super::stack_inputs(&items)
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
    pub enhancement: EnhancementKind,
    /// Computed on the enhanced training split only.
    pub stats: NormStats,
    pub side: usize,
}

impl PreparedData {
    pub fn split(&self, s: Split) -> &PreparedSplit {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn enhance_all(items: &[LabeledImage], kind: EnhancementKind, cfg: &EnhanceConfig) -> Result<Vec<ImageGray>, EnhanceError> {
    items.par_iter().map(|i| enhance(&i.image, kind, cfg)).collect()
}

fn finish(items: &[LabeledImage], images: &[ImageGray], side: usize, stats: &NormStats) -> PreparedSplit {
    PreparedSplit {
        inputs: images.par_iter().map(|im| to_model_input(im, side, stats)).collect(),
        labels: items.iter().map(|i| i.label.index()).collect(),
        ids: items.iter().map(|i| i.id.clone()).collect(),
    }
}

/// Applies `kind` to every image, fits normalization on the training split
/// and converts all three splits.
pub fn prepare(ds: &Dataset, kind: EnhancementKind, cfg: &EnhanceConfig, side: usize) -> Result<PreparedData, EnhanceError> {
    let train = enhance_all(&ds.train, kind, cfg)?;
    let val = enhance_all(&ds.val, kind, cfg)?;
    let test = enhance_all(&ds.test, kind, cfg)?;
    let stats = NormStats::from_images(&train, side);
    Ok(PreparedData {
        train: finish(&ds.train, &train, side, &stats),
        val: finish(&ds.val, &val, side, &stats),
        test: finish(&ds.test, &test, side, &stats),
        enhancement: kind,
        stats,
        side,
    })
}
