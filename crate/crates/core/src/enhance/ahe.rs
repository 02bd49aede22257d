use serde::{Deserialize, Serialize};

use super::EnhanceError;
use crate::image::ImageGray;

/// Contrast-limited adaptive histogram equalization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AheParams {
    /// Tile grid as (rows, cols).
    pub tile_grid: (usize, usize),
    /// Multiple of the uniform bin height; `f64::INFINITY` disables clipping.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for AheParams {
    fn default() -> Self {
        Self {
            tile_grid: (8, 8),
            clip_limit: 2.0,
            bins: 256,
        }
    }
}

impl AheParams {
    pub fn validate(&self) -> Result<(), EnhanceError> {
        let (r, c) = self.tile_grid;
        if r == 0 || c == 0 {
            return Err(EnhanceError::InvalidParams(format!("tile grid {r}x{c} must be positive")));
        }
        if !(self.clip_limit >= 1.0) {
            return Err(EnhanceError::InvalidParams(format!(
                "clip limit {} must be >= 1",
                self.clip_limit
            )));
        }
        if !(2..=256).contains(&self.bins) {
            return Err(EnhanceError::InvalidParams(format!("bins {} outside [2, 256]", self.bins)));
        }
        Ok(())
    }
}

/// Reflect-101 index into `0..n` (`-1 -> 1`, `n -> n - 2`).
fn reflect101(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Per-tile lookup table indexed by pixel value.
fn tile_lut(hist_raw: &[u32], area: u32, p: &AheParams) -> [u8; 256] {
    let bins = p.bins;
    let mut identity = [0u8; 256];
    for (v, o) in identity.iter_mut().enumerate() {
        *o = v as u8;
    }
    let lo = hist_raw.iter().position(|&h| h > 0);
    let hi = hist_raw.iter().rposition(|&h| h > 0);
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return identity;
    };
    if lo == hi {
        return identity;
    }
    let mut hist = hist_raw.to_vec();
    if p.clip_limit.is_finite() {
        let limit = ((p.clip_limit * area as f64 / bins as f64) as u32).max(1);
        let mut excess = 0u32;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let batch = excess / bins as u32;
        let residual = (excess % bins as u32) as usize;
        for h in hist.iter_mut() {
            *h += batch;
        }
        if residual > 0 {
            let step = (bins / residual).max(1);
            for i in (0..bins).step_by(step).take(residual) {
                hist[i] += 1;
            }
        }
    }
    let mut cdf = vec![0u64; bins];
    let mut acc = 0u64;
    for (c, &h) in cdf.iter_mut().zip(&hist) {
        acc += h as u64;
        *c = acc;
    }
    let base = cdf[lo] as f64;
    let span = cdf[hi] as f64 - base;
    if span <= 0.0 {
        return identity;
    }
    let mut lut = [0u8; 256];
    for (v, o) in lut.iter_mut().enumerate() {
        let b = v * bins / 256;
        let y = (255.0 * (cdf[b] as f64 - base) / span).round();
        *o = y.clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Contrast-limited adaptive histogram equalization.
///
/// Each tile's histogram is clipped at `clip_limit` times the uniform bin
/// height and the excess spread evenly over all bins. The tile mapping
/// stretches the clipped CDF between the tile's lowest and highest occupied
/// bins onto 0..=255; tiles holding a single gray level map identically.
/// Pixel outputs blend the four surrounding tile mappings bilinearly with
/// weights taken at tile centers. Images that do not divide evenly into the
/// grid are padded by reflection for histogram purposes.
pub fn ahe(img: &ImageGray, p: &AheParams) -> Result<ImageGray, EnhanceError> {
    p.validate()?;
    let (w, h) = (img.width(), img.height());
    let (rows, cols) = p.tile_grid;
    if w < cols || h < rows {
        return Err(EnhanceError::ImageTooSmall {
            width: w,
            height: h,
            need_width: cols,
            need_height: rows,
        });
    }
    let tile_h = h.div_ceil(rows);
    let tile_w = w.div_ceil(cols);
    let area = (tile_h * tile_w) as u32;

    let mut luts = Vec::with_capacity(rows * cols);
    let mut hist = vec![0u32; p.bins];
    for ty in 0..rows {
        for tx in 0..cols {
            hist.iter_mut().for_each(|v| *v = 0);
            for y in ty * tile_h..(ty + 1) * tile_h {
                let sy = reflect101(y as isize, h);
                for x in tx * tile_w..(tx + 1) * tile_w {
                    let sx = reflect101(x as isize, w);
                    hist[img.get(sx, sy) as usize * p.bins / 256] += 1;
                }
            }
            luts.push(tile_lut(&hist, area, p));
        }
    }

    let coord = |i: usize, tile: usize, n: usize| -> (usize, usize, f64) {
        let f = (i as f64 + 0.5) / tile as f64 - 0.5;
        let t0 = f.floor();
        let a = f - t0;
        let clamp = |t: f64| (t.max(0.0) as usize).min(n - 1);
        (clamp(t0), clamp(t0 + 1.0), a)
    };
    let out = ImageGray::from_fn(w, h, |x, y| {
        let (y1, y2, ya) = coord(y, tile_h, rows);
        let (x1, x2, xa) = coord(x, tile_w, cols);
        let v = img.get(x, y) as usize;
        let l = |ty: usize, tx: usize| luts[ty * cols + tx][v] as f64;
        let top = (1.0 - xa) * l(y1, x1) + xa * l(y1, x2);
        let bottom = (1.0 - xa) * l(y2, x1) + xa * l(y2, x2);
        ((1.0 - ya) * top + ya * bottom).round().clamp(0.0, 255.0) as u8
    });
    Ok(out)
}
