use image::{Rgb, RgbImage};

use super::{AttributionMap, XaiError};
use crate::image::ImageGray;

/// Control points `(position, rgb)` of the heatmap palette (a jet ramp from
/// dark blue through cyan and yellow to dark red). Entry `i` of the 256-entry
/// table linearly interpolates these at `i / 255` and rounds.
pub const PALETTE_STOPS: [(f64, [u8; 3]); 6] = [
    (0.0, [0, 0, 128]),
    (0.125, [0, 0, 255]),
    (0.375, [0, 255, 255]),
    (0.625, [255, 255, 0]),
    (0.875, [255, 0, 0]),
    (1.0, [128, 0, 0]),
];

const ALPHA: f64 = 0.5;

pub fn palette() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let t = i as f64 / 255.0;
        let k = PALETTE_STOPS.windows(2).position(|w| t <= w[1].0).unwrap_or(PALETTE_STOPS.len() - 2);
        let ((t0, c0), (t1, c1)) = (PALETTE_STOPS[k], PALETTE_STOPS[k + 1]);
        let f = (t - t0) / (t1 - t0);
        for ch in 0..3 {
            entry[ch] = (c0[ch] as f64 + f * (c1[ch] as f64 - c0[ch] as f64)).round() as u8;
        }
    }
    table
}

/// Min-max normalizes `map`, looks each pixel up in [`palette`] and blends
/// it half-and-half over the grayscale image.
pub fn overlay(img: &ImageGray, map: &AttributionMap) -> Result<RgbImage, XaiError> {
    if (img.width(), img.height()) != (map.width, map.height) {
        return Err(XaiError::Shape(format!(
            "image is {}x{}, map is {}x{}",
            img.width(),
            img.height(),
            map.width,
            map.height
        )));
    }
    let table = palette();
    let norm = map.normalized();
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    for (i, (&v, &gray)) in norm.iter().zip(img.pixels()).enumerate() {
        let color = table[(v * 255.0).round() as usize];
        let px = color.map(|c| ((1.0 - ALPHA) * gray as f64 + ALPHA * c as f64).round() as u8);
        out.put_pixel((i % map.width) as u32, (i / map.width) as u32, Rgb(px));
    }
    Ok(out)
}
