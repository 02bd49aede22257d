//! Image enhancement transforms producing the four model-input variants.

mod ahe;
mod hog;
mod render;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageGray;

pub use ahe::{ahe, AheParams};
pub use hog::{cell_histograms, hog_descriptor, HogDescriptor, HogParams};
pub use render::hog_render;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnhanceError {
    #[error("image {width}x{height} is smaller than the required {need_width}x{need_height}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        need_width: usize,
        need_height: usize,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnhancementKind {
    Original,
    Negative,
    Ahe,
    Hog,
}

impl EnhancementKind {
    pub const ALL: [EnhancementKind; 4] = [Self::Original, Self::Negative, Self::Ahe, Self::Hog];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Negative => "negative",
            Self::Ahe => "ahe",
            Self::Hog => "hog",
        }
    }
}

impl fmt::Display for EnhancementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnhancementKind {
    type Err = EnhanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "original" | "orig" => Ok(Self::Original),
            "negative" | "neg" => Ok(Self::Negative),
            "ahe" | "clahe" => Ok(Self::Ahe),
            "hog" => Ok(Self::Hog),
            other => Err(EnhanceError::InvalidParams(format!("unknown enhancement `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    pub ahe: AheParams,
    pub hog: HogParams,
}

/// `255 − v` per pixel.
pub fn negative(img: &ImageGray) -> ImageGray {
    img.map(|v| 255 - v)
}

pub fn enhance(img: &ImageGray, kind: EnhancementKind, cfg: &EnhanceConfig) -> Result<ImageGray, EnhanceError> {
    match kind {
        EnhancementKind::Original => Ok(img.clone()),
        EnhancementKind::Negative => Ok(negative(img)),
        EnhancementKind::Ahe => ahe(img, &cfg.ahe),
        EnhancementKind::Hog => {
            let desc = hog_descriptor(img, &cfg.hog)?;
            hog_render(&desc, &cfg.hog, (img.height(), img.width()))
        }
    }
}
