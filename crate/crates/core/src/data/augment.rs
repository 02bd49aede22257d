use serde::{Deserialize, Serialize};

use super::LabeledImage;
use crate::image::ImageGray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AugmentationOp {
    FlipH,
    FlipV,
    /// Counter-clockwise rotation by `k × 90°`, `k ∈ {1, 2, 3}`.
    Rotate(u8),
    /// Additive offset, clamped to 0..=255.
    Brightness(i16),
    /// Scale about mid-gray, clamped to 0..=255.
    Contrast(f64),
}

impl AugmentationOp {
    /// Short tag used in derived image ids.
    pub fn tag(&self) -> String {
        match self {
            Self::FlipH => "fliph".into(),
            Self::FlipV => "flipv".into(),
            Self::Rotate(k) => format!("rot{}", 90 * *k as u32),
            Self::Brightness(d) => format!("bright{d:+}"),
            Self::Contrast(f) => format!("contrast{f}"),
        }
    }

    /// Operations drawn from when balancing classes.
    pub fn balancing_pool() -> Vec<AugmentationOp> {
        vec![
            Self::FlipH,
            Self::FlipV,
            Self::Rotate(1),
            Self::Rotate(2),
            Self::Rotate(3),
            Self::Brightness(15),
            Self::Brightness(-15),
            Self::Contrast(1.15),
            Self::Contrast(0.85),
        ]
    }

    pub fn apply(&self, img: &ImageGray) -> ImageGray {
        let (w, h) = (img.width(), img.height());
        match *self {
            Self::FlipH => ImageGray::from_fn(w, h, |x, y| img.get(w - 1 - x, y)),
            Self::FlipV => ImageGray::from_fn(w, h, |x, y| img.get(x, h - 1 - y)),
            Self::Rotate(k) => match k % 4 {
                0 => img.clone(),
                1 => ImageGray::from_fn(h, w, |x, y| img.get(w - 1 - y, x)),
                2 => ImageGray::from_fn(w, h, |x, y| img.get(w - 1 - x, h - 1 - y)),
                _ => ImageGray::from_fn(h, w, |x, y| img.get(y, h - 1 - x)),
            },
            Self::Brightness(d) => img.map(|v| (v as i32 + d as i32).clamp(0, 255) as u8),
            Self::Contrast(f) => img.map(|v| ((v as f64 - 128.0) * f + 128.0).round().clamp(0.0, 255.0) as u8),
        }
    }
}

/// One augmented copy per op; ids become `<id>_aug<k>_<tag>` with `k`
/// starting at `first_index`.
pub fn augment_from(img: &LabeledImage, ops: &[AugmentationOp], first_index: usize) -> Vec<LabeledImage> {
    ops.iter()
        .enumerate()
        .map(|(i, op)| LabeledImage {
            image: op.apply(&img.image),
            label: img.label,
            source: img.source,
            id: format!("{}_aug{}_{}", img.id, first_index + i, op.tag()),
        })
        .collect()
}

pub fn augment(img: &LabeledImage, ops: &[AugmentationOp]) -> Vec<LabeledImage> {
    augment_from(img, ops, 1)
}
