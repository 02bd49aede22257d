//! 8-bit grayscale raster plus PGM/PNG file I/O.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{GrayImage, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions {width}x{height} do not match {len} pixels")]
    Dimensions { width: usize, height: usize, len: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Decode { path: String, detail: String },
    #[error("{path}: unsupported extension (expected .pgm or .png)")]
    Extension { path: String },
}

/// Row-major 8-bit grayscale image.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageGray {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageGray {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageGray({}x{})", self.width, self.height)
    }
}

impl ImageGray {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImageError::Dimensions {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Reads a binary PGM or 8-bit PNG; color PNGs are converted to luma.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let format = format_of(path)?;
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Self::new(w as usize, h as usize, gray.into_raw())
    }

    /// Writes binary PGM (P5) or PNG depending on the extension.
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let format = format_of(path)?;
        let mut out = Vec::new();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match format {
            ImageFormat::Png => image::codecs::png::PngEncoder::new(&mut out).write_image(
                &self.pixels,
                w,
                h,
                image::ExtendedColorType::L8,
            ),
            _ => PnmEncoder::new(&mut out)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(&self.pixels, w, h, image::ExtendedColorType::L8),
        };
        res.map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        std::fs::write(path, out).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone()).expect("consistent dims")
    }
}

fn format_of(path: &Path) -> Result<ImageFormat, ImageError> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "pgm" => Ok(ImageFormat::Pnm),
        Some(e) if e == "png" => Ok(ImageFormat::Png),
        _ => Err(ImageError::Extension {
            path: path.display().to_string(),
        }),
    }
}
