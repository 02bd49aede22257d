//! Straight-line reference implementations used as test oracles.

use mammo_core::ImageGray;

/// Global histogram equalization: `round(255 (cdf(v) − cdf_min) / (N − cdf_min))`.
pub fn global_he(img: &ImageGray) -> ImageGray {
    let n = img.pixels().len() as f64;
    let mut cdf = [0f64; 256];
    for v in 0..256usize {
        cdf[v] = img.pixels().iter().filter(|&&p| (p as usize) <= v).count() as f64;
    }
    let cdf_min = cdf.iter().cloned().find(|&c| c > 0.0).unwrap();
    if n == cdf_min {
        return img.clone();
    }
    img.map(|p| (255.0 * (cdf[p as usize] - cdf_min) / (n - cdf_min)).round() as u8)
}

/// HOG with cell 8, block 2, unsigned orientation, written independently of
/// the library: per-pixel triangular bin weights and explicit loops.
pub fn reference_hog(img: &ImageGray, cell: usize, block: usize, bins: usize) -> Vec<f64> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let at = |x: i64, y: i64| -> f64 {
        let xc = x.clamp(0, w - 1) as usize;
        let yc = y.clamp(0, h - 1) as usize;
        img.get(xc, yc) as f64
    };
    let cells_x = (w as usize) / cell;
    let cells_y = (h as usize) / cell;
    let width = 180.0 / bins as f64;
    let mut hist = vec![vec![vec![0.0f64; bins]; cells_x]; cells_y];
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            for py in 0..cell {
                for px in 0..cell {
                    let x = (cx * cell + px) as i64;
                    let y = (cy * cell + py) as i64;
                    let gx = at(x + 1, y) - at(x - 1, y);
                    let gy = at(x, y + 1) - at(x, y - 1);
                    let m = gx.hypot(gy);
                    if m == 0.0 {
                        continue;
                    }
                    let mut theta = gy.atan2(gx).to_degrees();
                    while theta < 0.0 {
                        theta += 180.0;
                    }
                    while theta >= 180.0 {
                        theta -= 180.0;
                    }
                    for b in 0..bins {
                        let center = b as f64 * width;
                        let mut d = (theta - center).abs();
                        d = d.min(180.0 - d);
                        let wgt = 1.0 - d / width;
                        if wgt > 0.0 {
                            hist[cy][cx][b] += m * wgt;
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for by in 0..=(cells_y - block) {
        for bx in 0..=(cells_x - block) {
            let mut v = Vec::new();
            for dy in 0..block {
                for dx in 0..block {
                    v.extend(hist[by + dy][bx + dx].iter().cloned());
                }
            }
            let eps2 = 1e-10;
            let n1 = (v.iter().map(|a| a * a).sum::<f64>() + eps2).sqrt();
            let v: Vec<f64> = v.iter().map(|a| (a / n1).min(0.2)).collect();
            let n2 = (v.iter().map(|a| a * a).sum::<f64>() + eps2).sqrt();
            out.extend(v.iter().map(|a| a / n2));
        }
    }
    out
}
