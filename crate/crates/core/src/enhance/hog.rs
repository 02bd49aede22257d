use serde::{Deserialize, Serialize};

use super::EnhanceError;
use crate::image::ImageGray;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HogParams {
    /// Pixels per cell side.
    pub cell: usize,
    /// Cells per block side.
    pub block: usize,
    pub bins: usize,
    /// Orientations over 0..360° when set, 0..180° otherwise.
    pub signed: bool,
}

impl Default for HogParams {
    fn default() -> Self {
        Self {
            cell: 8,
            block: 2,
            bins: 9,
            signed: false,
        }
    }
}

impl HogParams {
    pub fn validate(&self) -> Result<(), EnhanceError> {
        if self.cell < 2 || self.block < 1 || self.bins < 2 {
            return Err(EnhanceError::InvalidParams(format!(
                "hog cell {} (>= 2), block {} (>= 1), bins {} (>= 2)",
                self.cell, self.block, self.bins
            )));
        }
        Ok(())
    }

    fn range_deg(&self) -> f64 {
        if self.signed {
            360.0
        } else {
            180.0
        }
    }
}

/// Block-normalized orientation histograms. Blocks step by one cell; each
/// block vector lists its cells row-major, `bins` values per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HogDescriptor {
    pub blocks_y: usize,
    pub blocks_x: usize,
    pub block: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl HogDescriptor {
    pub fn block_len(&self) -> usize {
        self.block * self.block * self.bins
    }

    pub fn cells_y(&self) -> usize {
        self.blocks_y + self.block - 1
    }

    pub fn cells_x(&self) -> usize {
        self.blocks_x + self.block - 1
    }

    pub fn block_vector(&self, by: usize, bx: usize) -> &[f64] {
        let n = self.block_len();
        let i = by * self.blocks_x + bx;
        &self.values[i * n..(i + 1) * n]
    }
}

const L2HYS_EPS: f64 = 1e-5;
const L2HYS_CLIP: f64 = 0.2;

/// Unnormalized per-cell histograms: returns `(cells_y, cells_x, values)`
/// with `bins` values per cell, cells row-major.
///
/// Gradients use the centered `[-1, 0, 1]` kernel with replicated borders.
/// Bin `i` is centered on `i · range / bins`; each pixel's magnitude is split
/// linearly between the two nearest centers (wrapping at the range end).
pub fn cell_histograms(img: &ImageGray, p: &HogParams) -> Result<(usize, usize, Vec<f64>), EnhanceError> {
    p.validate()?;
    let (w, h) = (img.width(), img.height());
    let need = p.cell * p.block;
    if w < need || h < need {
        return Err(EnhanceError::ImageTooSmall {
            width: w,
            height: h,
            need_width: need,
            need_height: need,
        });
    }
    let (cy, cx) = (h / p.cell, w / p.cell);
    let mut hist = vec![0.0f64; cy * cx * p.bins];
    let range = p.range_deg();
    let bin_width = range / p.bins as f64;
    for y in 0..cy * p.cell {
        for x in 0..cx * p.cell {
            let px = |xx: usize, yy: usize| img.get(xx, yy) as f64;
            let gx = px((x + 1).min(w - 1), y) - px(x.saturating_sub(1), y);
            let gy = px(x, (y + 1).min(h - 1)) - px(x, y.saturating_sub(1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 360.0;
            }
            angle %= range;
            let pos = angle / bin_width;
            let b0 = pos.floor();
            let frac = pos - b0;
            let b0 = (b0 as usize) % p.bins;
            let b1 = (b0 + 1) % p.bins;
            let base = ((y / p.cell) * cx + x / p.cell) * p.bins;
            hist[base + b0] += mag * (1.0 - frac);
            hist[base + b1] += mag * frac;
        }
    }
    Ok((cy, cx, hist))
}

/// HOG descriptor with L2-Hys block normalization.
pub fn hog_descriptor(img: &ImageGray, p: &HogParams) -> Result<HogDescriptor, EnhanceError> {
    let (cy, cx, hist) = cell_histograms(img, p)?;
    let blocks_y = cy - p.block + 1;
    let blocks_x = cx - p.block + 1;
    let block_len = p.block * p.block * p.bins;
    let mut values = Vec::with_capacity(blocks_y * blocks_x * block_len);
    let mut v = Vec::with_capacity(block_len);
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            v.clear();
            for dy in 0..p.block {
                for dx in 0..p.block {
                    let base = ((by + dy) * cx + bx + dx) * p.bins;
                    v.extend_from_slice(&hist[base..base + p.bins]);
                }
            }
            l2_hys(&mut v);
            values.extend_from_slice(&v);
        }
    }
    Ok(HogDescriptor {
        blocks_y,
        blocks_x,
        block: p.block,
        bins: p.bins,
        values,
    })
}

fn l2_hys(v: &mut [f64]) {
    let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() + L2HYS_EPS * L2HYS_EPS).sqrt();
    let n = norm(v);
    for x in v.iter_mut() {
        *x = (*x / n).min(L2HYS_CLIP);
    }
    let n = norm(v);
    for x in v.iter_mut() {
        *x /= n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_gives_zero_descriptor() {
        let d = hog_descriptor(&ImageGray::filled(32, 32, 90), &HogParams::default()).unwrap();
        assert_eq!((d.blocks_y, d.blocks_x), (3, 3));
        assert_eq!(d.values.len(), 9 * 36);
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_small_rejected() {
        let err = hog_descriptor(&ImageGray::filled(15, 32, 0), &HogParams::default()).unwrap_err();
        assert!(matches!(err, EnhanceError::ImageTooSmall { .. }));
    }

    #[test]
    fn horizontal_gradient_lands_in_bin_zero() {
        let img = ImageGray::from_fn(16, 16, |x, _| (x * 10) as u8);
        let (_, _, h) = cell_histograms(&img, &HogParams::default()).unwrap();
        for cell in h.chunks(9) {
            assert!(cell[0] > 0.0);
            assert!(cell[1..].iter().all(|&v| v == 0.0));
        }
    }
}
