use serde::{Deserialize, Serialize};

use crate::image::ImageGray;
use crate::tensor::Tensor;

/// Bilinear resize with half-pixel centers, returning values on the 0..=255
/// scale. Sampling positions are clamped to the source grid.
pub fn resize_bilinear(img: &ImageGray, out_h: usize, out_w: usize) -> Vec<f64> {
    let src: Vec<f64> = img.pixels().iter().map(|&v| v as f64).collect();
    resize_bilinear_f64(&src, img.height(), img.width(), out_h, out_w)
}

/// [`resize_bilinear`] on a row-major `h × w` float plane.
pub fn resize_bilinear_f64(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "plane is not {h}x{w}");
    if (w, h) == (out_w, out_h) {
        return src.to_vec();
    }
    let axis = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ty) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = axis(x, w, out_w);
            let p = |xx: usize, yy: usize| src[yy * w + xx];
            let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
            let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Dataset-level standardization constants on the [0, 1] intensity scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl NormStats {
    /// Mean and population standard deviation over all pixels of the images
    /// after resizing to `side`. A zero spread falls back to 1.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a ImageGray>, side: usize) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for img in images {
            for v in resize_bilinear(img, side, side) {
                let v = v / 255.0;
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }
}

/// Model input `[1, side, side]`: resize, scale to [0, 1], standardize.
pub fn to_model_input(img: &ImageGray, side: usize, stats: &NormStats) -> Tensor<f32> {
    assert!(side >= 16, "model input side {side} must be >= 16");
    let data = resize_bilinear(img, side, side)
        .into_iter()
        .map(|v| ((v / 255.0 - stats.mean) / stats.std) as f32)
        .collect();
    Tensor::new(vec![1, side, side], data).expect("side x side")
}
