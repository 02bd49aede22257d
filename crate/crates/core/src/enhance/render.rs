use super::{EnhanceError, HogDescriptor, HogParams};
use crate::image::ImageGray;

/// Renders a descriptor as an orientation-energy glyph image of size
/// `out_size = (height, width)`.
///
/// A cell's energy in bin `b` is the mean of that cell's entries across every
/// block containing it. Each bin draws a line through the cell center along
/// the edge direction (perpendicular to the bin's gradient orientation),
/// weighted by its energy; lines stay inside their cell. The canvas is then
/// scaled so the brightest pixel is 255.
pub fn hog_render(desc: &HogDescriptor, p: &HogParams, out_size: (usize, usize)) -> Result<ImageGray, EnhanceError> {
    p.validate()?;
    let (out_h, out_w) = out_size;
    if desc.block != p.block || desc.bins != p.bins || desc.values.len() != desc.blocks_y * desc.blocks_x * desc.block_len() {
        return Err(EnhanceError::InvalidParams(
            "descriptor layout does not match hog parameters".into(),
        ));
    }
    let (cells_y, cells_x) = (desc.cells_y(), desc.cells_x());
    if out_h < cells_y || out_w < cells_x {
        return Err(EnhanceError::ImageTooSmall {
            width: out_w,
            height: out_h,
            need_width: cells_x,
            need_height: cells_y,
        });
    }
    let bins = p.bins;
    let mut energy = vec![0.0f64; cells_y * cells_x * bins];
    let mut counts = vec![0usize; cells_y * cells_x];
    for by in 0..desc.blocks_y {
        for bx in 0..desc.blocks_x {
            let v = desc.block_vector(by, bx);
            for dy in 0..p.block {
                for dx in 0..p.block {
                    let cell = (by + dy) * cells_x + bx + dx;
                    counts[cell] += 1;
                    let src = &v[(dy * p.block + dx) * bins..][..bins];
                    for (e, s) in energy[cell * bins..][..bins].iter_mut().zip(src) {
                        *e += s;
                    }
                }
            }
        }
    }

    // cells are laid out over the whole canvas
    let cs_y = out_h as f64 / cells_y as f64;
    let cs_x = out_w as f64 / cells_x as f64;
    let range = if p.signed { 360.0 } else { 180.0 };
    let mut canvas = vec![0.0f64; out_h * out_w];
    let mut stamped = Vec::new();
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let cell = cy * cells_x + cx;
            let (y0, y1) = ((cy as f64 * cs_y).round() as isize, ((cy + 1) as f64 * cs_y).round() as isize - 1);
            let (x0, x1) = ((cx as f64 * cs_x).round() as isize, ((cx + 1) as f64 * cs_x).round() as isize - 1);
            let center = ((y0 + y1) as f64 / 2.0, (x0 + x1) as f64 / 2.0);
            let half = ((y1 - y0).min(x1 - x0)) as f64 / 2.0;
            for b in 0..bins {
                let e = energy[cell * bins + b] / counts[cell] as f64;
                if e <= 0.0 {
                    continue;
                }
                let edge = (b as f64 * range / bins as f64 + 90.0).to_radians();
                let (dy, dx) = (edge.sin(), edge.cos());
                stamped.clear();
                let steps = (4.0 * half).ceil().max(1.0) as usize;
                for s in 0..=steps {
                    let t = -half + 2.0 * half * s as f64 / steps as f64;
                    let y = (center.0 + t * dy).round().clamp(y0 as f64, y1 as f64) as usize;
                    let x = (center.1 + t * dx).round().clamp(x0 as f64, x1 as f64) as usize;
                    let idx = y * out_w + x;
                    if !stamped.contains(&idx) {
                        stamped.push(idx);
                        canvas[idx] += e;
                    }
                }
            }
        }
    }
    let max = canvas.iter().cloned().fold(0.0f64, f64::max);
    let pixels = if max > 0.0 {
        canvas.iter().map(|v| (v / max * 255.0).round() as u8).collect()
    } else {
        vec![0; out_h * out_w]
    };
    Ok(ImageGray::new(out_w, out_h, pixels).expect("canvas dims"))
}
