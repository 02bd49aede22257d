use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Label;
use crate::image::ImageGray;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenignParams {
    /// Semi-major radius range as a fraction of the image side.
    pub radius: (f64, f64),
    /// Minor/major axis ratio range.
    pub aspect: (f64, f64),
    /// Width of the boundary transition in units of the normalized radius.
    pub edge_softness: f64,
}

impl Default for BenignParams {
    fn default() -> Self {
        Self {
            radius: (0.14, 0.22),
            aspect: (0.7, 1.0),
            edge_softness: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MalignantParams {
    /// Core radius range as a fraction of the image side.
    pub core_radius: (f64, f64),
    /// Inclusive spike count range.
    pub spike_count: (usize, usize),
    /// Spike length range as a fraction of the core radius.
    pub spike_length: (f64, f64),
    /// Relative amplitude of the low-frequency margin perturbation.
    pub margin_irregularity: f64,
    /// Spike half-width at the base, in pixels.
    pub spike_width: f64,
}

impl Default for MalignantParams {
    fn default() -> Self {
        Self {
            core_radius: (0.10, 0.16),
            spike_count: (6, 14),
            spike_length: (0.4, 0.9),
            margin_irregularity: 0.25,
            spike_width: 1.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub size: usize,
    /// Mean background intensity in [0, 1].
    pub background_level: f64,
    /// Peak-to-peak amplitude of the fractal background texture.
    pub background_noise: f64,
    /// Intensity added at the lesion center.
    pub lesion_intensity: f64,
    pub benign: BenignParams,
    pub malignant: MalignantParams,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 64,
            background_level: 0.3,
            background_noise: 0.25,
            lesion_intensity: 0.45,
            benign: BenignParams::default(),
            malignant: MalignantParams::default(),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), String> {
        let range_ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && 0.0 < a && a <= b;
        if self.size < 32 {
            return Err(format!("synthetic size {} must be >= 32", self.size));
        }
        if !range_ok(self.benign.radius) || !range_ok(self.benign.aspect) || self.benign.aspect.1 > 1.0 {
            return Err("benign radius/aspect ranges must be nonempty and positive (aspect <= 1)".into());
        }
        if !(self.benign.edge_softness > 0.0) {
            return Err("benign edge_softness must be positive".into());
        }
        let m = &self.malignant;
        if !range_ok(m.core_radius) || !range_ok(m.spike_length) || m.spike_count.0 > m.spike_count.1 {
            return Err("malignant ranges must be nonempty and positive".into());
        }
        if !(m.margin_irregularity >= 0.0) || !(m.spike_width > 0.0) {
            return Err("malignant margin_irregularity must be >= 0 and spike_width > 0".into());
        }
        if !(0.0..=1.0).contains(&self.background_level) || !(self.background_noise >= 0.0) {
            return Err("background level must lie in [0, 1] and noise be >= 0".into());
        }
        Ok(())
    }
}

const BACKGROUND_STREAM: u64 = 0xb9;
const OCTAVES: usize = 4;

/// Fractal value noise in [0, 1]: octaves of smoothly interpolated lattice
/// values, each twice as fine and half as strong as the previous.
fn value_noise(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed, &[BACKGROUND_STREAM]);
    let mut out = vec![0.0; size * size];
    let mut amp = 1.0;
    let mut total = 0.0;
    for o in 0..OCTAVES {
        let cells = 4usize << o;
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
        let step = size as f64 / cells as f64;
        for y in 0..size {
            let fy = y as f64 / step;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..size {
                let fx = x as f64 / step;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let l = |yy: usize, xx: usize| lattice[yy.min(cells) * (cells + 1) + xx.min(cells)];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bottom = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                out[y * size + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Textured background alone, shared by both classes for a given seed.
pub fn synth_background(seed: u64, params: &SynthParams) -> Vec<f64> {
    value_noise(params.size, seed)
        .into_iter()
        .map(|n| params.background_level + params.background_noise * (n - 0.5))
        .collect()
}

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt(), t)
}

/// Lesion opacity in [0, 1] per pixel.
fn lesion_mask(label: Label, seed: u64, p: &SynthParams) -> Vec<f64> {
    let mut rng = seed::rng(seed, &[label as u64 + 1]);
    let n = p.size;
    let s = n as f64;
    let center = (
        s / 2.0 + rng.gen_range(-0.1..=0.1) * s,
        s / 2.0 + rng.gen_range(-0.1..=0.1) * s,
    );
    let mut mask = vec![0.0; n * n];
    match label {
        Label::Benign => {
            let b = &p.benign;
            let rx = rng.gen_range(b.radius.0..=b.radius.1) * s;
            let ry = rx * rng.gen_range(b.aspect.0..=b.aspect.1);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (sin, cos) = theta.sin_cos();
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy) = (x as f64 - center.0, y as f64 - center.1);
                    let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
                    let d = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
                    mask[y * n + x] = sigmoid((1.0 - d) / b.edge_softness);
                }
            }
        }
        Label::Malignant => {
            let m = &p.malignant;
            let r = rng.gen_range(m.core_radius.0..=m.core_radius.1) * s;
            let harmonics: Vec<(f64, f64, f64)> = (2..=6)
                .map(|k| {
                    (
                        k as f64,
                        rng.gen_range(-1.0..=1.0) / k as f64,
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let norm: f64 = harmonics.iter().map(|h| h.1.abs()).sum::<f64>().max(1e-12);
            let radius_at = |phi: f64| {
                let wobble: f64 = harmonics.iter().map(|&(k, a, ph)| a * (k * phi + ph).sin()).sum();
                r * (1.0 + m.margin_irregularity * wobble / norm)
            };
            let count = rng.gen_range(m.spike_count.0..=m.spike_count.1);
            let spikes: Vec<((f64, f64), (f64, f64))> = (0..count)
                .map(|_| {
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let len = r * rng.gen_range(m.spike_length.0..=m.spike_length.1);
                    let base = radius_at(a) * 0.8;
                    let tip = radius_at(a) + len;
                    let (sin, cos) = a.sin_cos();
                    (
                        (center.0 + base * cos, center.1 + base * sin),
                        (center.0 + tip * cos, center.1 + tip * sin),
                    )
                })
                .collect();
            let edge = 0.03 * r;
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy) = (x as f64 - center.0, y as f64 - center.1);
                    let dist = (dx * dx + dy * dy).sqrt();
                    let core = sigmoid((radius_at(dy.atan2(dx)) - dist) / edge);
                    let spike = spikes
                        .iter()
                        .map(|&(a, b)| {
                            let (d, t) = distance_to_segment((x as f64, y as f64), a, b);
                            let half = m.spike_width * (1.0 - 0.7 * t);
                            (1.0 - d / half).clamp(0.0, 1.0) * (1.0 - 0.3 * t)
                        })
                        .fold(0.0, f64::max);
                    mask[y * n + x] = core.max(spike);
                }
            }
        }
    }
    mask
}

/// Deterministic synthetic mammogram patch for `(label, seed, params)`.
///
/// The background depends on the seed alone, so the two classes generated
/// from one seed differ only in the lesion.
pub fn synth_generate(label: Label, seed: u64, params: &SynthParams) -> ImageGray {
    let bg = synth_background(seed, params);
    let mask = lesion_mask(label, seed, params);
    let n = params.size;
    let pixels = bg
        .iter()
        .zip(&mask)
        .map(|(b, m)| ((b + params.lesion_intensity * m).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    ImageGray::new(n, n, pixels).expect("square canvas")
}
