use super::{input_dims, AttributionMap, Scorer, XaiError};
use crate::data::resize_bilinear_f64;
use crate::models::TokenLayout;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Head-averaged attention `[n, n]` of a grid block for batch row 0.
fn head_mean(w: &[f64], heads: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for h in 0..heads {
        for (o, v) in out.iter_mut().zip(&w[h * n * n..(h + 1) * n * n]) {
            *o += v / heads as f64;
        }
    }
    out
}

fn column_sums(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in a.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Attention received per token on the image-aligned token grid, before
/// normalization: the head mean of each key's column sum in the final block,
/// or in the rolled-out product over all blocks. Returns `(values, h, w)`.
pub fn attention_received<S: Scalar>(
    scorer: &impl Scorer<S>,
    x: &Tensor<S>,
    rollout: bool,
) -> Result<(Vec<f64>, usize, usize), XaiError> {
    input_dims(x)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let f = scorer.record(&mut g, xv)?;
    let last = f.attention.last().ok_or(XaiError::NotTransformer)?;
    if rollout {
        let (h, w) = match last.layout {
            TokenLayout::Grid { h, w } => (h, w),
            TokenLayout::Windows { .. } => {
                return Err(XaiError::Unsupported("attention rollout needs full-grid attention blocks".into()))
            }
        };
        let n = h * w;
        // R ← (½A + ½I)·R per block, from the first block on
        let mut r: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        for rec in &f.attention {
            let shape = g.shape(rec.weights).to_vec();
            if rec.layout != last.layout || shape[2] != n {
                return Err(XaiError::Unsupported("attention rollout needs equal token grids in every block".into()));
            }
            let mut a = head_mean(&g.value(rec.weights).to_f64_vec(), shape[1], n);
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = 0.5 * a[i * n + j] + if i == j { 0.5 } else { 0.0 };
                }
            }
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    let aik = a[i * n + k];
                    if aik != 0.0 {
                        for j in 0..n {
                            next[i * n + j] += aik * r[k * n + j];
                        }
                    }
                }
            }
            r = next;
        }
        return Ok((column_sums(&r, n), h, w));
    }
    let shape = g.shape(last.weights).to_vec();
    let weights = g.value(last.weights).to_f64_vec();
    let (heads, n) = (shape[1], shape[2]);
    match last.layout {
        TokenLayout::Grid { h, w } => Ok((column_sums(&head_mean(&weights, heads, n), n), h, w)),
        TokenLayout::Windows { h, w, window, shift } => {
            let per_row = w / window;
            let mut out = vec![0.0; h * w];
            for b in 0..shape[0] {
                let (wy, wx) = (b / per_row, b % per_row);
                let a = head_mean(&weights[b * heads * n * n..(b + 1) * heads * n * n], heads, n);
                for (t, v) in column_sums(&a, n).into_iter().enumerate() {
                    // window coordinates live on the grid rolled by -shift
                    let ry = wy * window + t / window;
                    let rx = wx * window + t % window;
                    out[((ry + shift) % h) * w + (rx + shift) % w] = v;
                }
            }
            Ok((out, h, w))
        }
    }
}

/// Attention received per token, upsampled to the input and scaled to [0, 1].
pub fn attention_map<S: Scalar>(scorer: &impl Scorer<S>, x: &Tensor<S>, rollout: bool) -> Result<AttributionMap, XaiError> {
    let (_, ih, iw) = input_dims(x)?;
    let (cells, h, w) = attention_received(scorer, x, rollout)?;
    let up = AttributionMap::new(ih, iw, resize_bilinear_f64(&cells, h, w, ih, iw))?;
    AttributionMap::new(ih, iw, up.normalized())
}
