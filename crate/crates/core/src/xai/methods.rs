use rayon::prelude::*;

use super::{channel_sum, input_dims, AttributionMap, Scorer, XaiError};
use crate::data::resize_bilinear_f64;
use crate::scalar::Scalar;
use crate::tensor::{BackwardRule, Graph, Tensor};

/// Interpolation points evaluated per graph in integrated gradients.
const IG_CHUNK: usize = 16;

fn one_hot_rows<S: Scalar>(shape: &[usize], class: usize) -> Result<Tensor<S>, XaiError> {
    let (b, c) = match shape {
        &[b, c] => (b, c),
        s => return Err(XaiError::Shape(format!("logits must be [B, classes], got {s:?}"))),
    };
    if class >= c {
        return Err(XaiError::Class { class, classes: c });
    }
    let mut t = Tensor::zeros(&[b, c]);
    for r in 0..b {
        t.data_mut()[r * c + class] = S::one();
    }
    Ok(t)
}

/// Gradient of the class logit of each row with respect to the input rows.
fn batch_gradient<S: Scalar>(
    scorer: &impl Scorer<S>,
    batch: Tensor<S>,
    class: usize,
    rule: &BackwardRule<'_, S>,
) -> Result<Vec<f64>, XaiError> {
    let n = batch.numel();
    let mut g = Graph::new();
    let xv = g.leaf(batch, true);
    let f = scorer.record(&mut g, xv)?;
    let seed = one_hot_rows(g.shape(f.logits), class)?;
    g.backward_with(f.logits, &seed, rule)?;
    Ok(g.grad(xv).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; n]))
}

/// Class logit for a single-image batch, without gradients.
pub(crate) fn score<S: Scalar>(scorer: &impl Scorer<S>, x: &Tensor<S>, class: usize) -> Result<f64, XaiError> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let f = scorer.record(&mut g, xv)?;
    let logits = g.value(f.logits);
    let c = logits.shape().get(1).copied().unwrap_or(0);
    if class >= c {
        return Err(XaiError::Class { class, classes: c });
    }
    Ok(logits.data()[class].widen())
}

/// `∂F_class/∂x` for a single input, same shape as `x`.
pub fn input_gradient<S: Scalar>(scorer: &impl Scorer<S>, x: &Tensor<S>, class: usize) -> Result<Tensor<S>, XaiError> {
    input_dims(x)?;
    let grad = batch_gradient(scorer, x.clone(), class, &BackwardRule::Standard)?;
    Ok(Tensor::from_f64(x.shape(), &grad)?)
}

/// `|∂F_class/∂x|` summed over channels.
pub fn saliency<S: Scalar>(scorer: &impl Scorer<S>, x: &Tensor<S>, class: usize) -> Result<AttributionMap, XaiError> {
    let (c, h, w) = input_dims(x)?;
    let grad = batch_gradient(scorer, x.clone(), class, &BackwardRule::Standard)?;
    let abs: Vec<f64> = grad.iter().map(|v| v.abs()).collect();
    Ok(channel_sum(&abs, c, h, w))
}

/// `(x − x′) ⊙ (1/m) Σ_k ∇F(x′ + ((k − ½)/m)(x − x′))`, summed over channels.
pub fn integrated_gradients<S: Scalar>(
    scorer: &impl Scorer<S>,
    x: &Tensor<S>,
    baseline: &Tensor<S>,
    steps: usize,
    class: usize,
) -> Result<AttributionMap, XaiError> {
    let (c, h, w) = input_dims(x)?;
    if baseline.shape() != x.shape() {
        return Err(XaiError::Shape(format!("baseline {:?} vs input {:?}", baseline.shape(), x.shape())));
    }
    if steps < 1 {
        return Err(XaiError::Config("ig_steps must be >= 1".into()));
    }
    let xs = x.to_f64_vec();
    let bs = baseline.to_f64_vec();
    let delta: Vec<f64> = xs.iter().zip(&bs).map(|(a, b)| a - b).collect();
    let n = xs.len();
    let mut total = vec![0.0f64; n];
    let ks: Vec<usize> = (1..=steps).collect();
    for chunk in ks.chunks(IG_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * n);
        for &k in chunk {
            let alpha = (k as f64 - 0.5) / steps as f64;
            data.extend(bs.iter().zip(&delta).map(|(b, d)| S::narrow(b + alpha * d)));
        }
        let batch = Tensor::new(vec![chunk.len(), c, h, w], data)?;
        let grads = batch_gradient(scorer, batch, class, &BackwardRule::Standard)?;
        for row in grads.chunks(n) {
            for (t, g) in total.iter_mut().zip(row) {
                *t += g;
            }
        }
    }
    let attr: Vec<f64> = total.iter().zip(&delta).map(|(t, d)| d * t / steps as f64).collect();
    Ok(channel_sum(&attr, c, h, w))
}

/// Top-left corners `0, stride, …` whose patch fits inside `side`.
pub(crate) fn occlusion_offsets(side: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..=side.saturating_sub(patch)).step_by(stride.max(1)).collect()
}

/// Slides a `patch × patch` window of `fill` over the input; every covered
/// pixel accumulates `F(x) − F(x_occluded)`, averaged over the patches that
/// cover it. Uncovered pixels stay 0.
pub fn occlusion<S: Scalar>(
    scorer: &impl Scorer<S>,
    x: &Tensor<S>,
    class: usize,
    patch: usize,
    stride: usize,
    fill: f64,
) -> Result<AttributionMap, XaiError> {
    let (c, h, w) = input_dims(x)?;
    if patch == 0 || patch > h.min(w) || stride == 0 {
        return Err(XaiError::Config(format!("occlusion patch {patch} / stride {stride} invalid for {h}x{w}")));
    }
    let base = score(scorer, x, class)?;
    let positions: Vec<(usize, usize)> = occlusion_offsets(h, patch, stride)
        .into_iter()
        .flat_map(|py| occlusion_offsets(w, patch, stride).into_iter().map(move |px| (py, px)))
        .collect();
    let fill = S::narrow(fill);
    let scores: Vec<f64> = positions
        .par_iter()
        .map(|&(py, px)| {
            let mut xm = x.clone();
            let d = xm.data_mut();
            for ch in 0..c {
                for yy in py..py + patch {
                    let row = (ch * h + yy) * w;
                    d[row + px..row + px + patch].fill(fill);
                }
            }
            score(scorer, &xm, class)
        })
        .collect::<Result<_, _>>()?;
    // accumulate in grid order so the result does not depend on scheduling
    let mut acc = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for (&(py, px), s) in positions.iter().zip(scores) {
        let diff = base - s;
        for yy in py..py + patch {
            for xx in px..px + patch {
                acc[yy * w + xx] += diff;
                count[yy * w + xx] += 1;
            }
        }
    }
    let values = acc
        .iter()
        .zip(&count)
        .map(|(&a, &n)| if n == 0 { 0.0 } else { a / n as f64 })
        .collect();
    AttributionMap::new(h, w, values)
}

/// GradCAM at the scorer's hook, before upsampling: `relu(Σ_k α_k A^k)` with
/// `α_k` the spatial mean of `∂F/∂A^k`. Returns `(map, hook_h, hook_w)`.
pub fn gradcam_cells<S: Scalar>(
    scorer: &impl Scorer<S>,
    x: &Tensor<S>,
    class: usize,
) -> Result<(Vec<f64>, usize, usize), XaiError> {
    input_dims(x)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let f = scorer.record(&mut g, xv)?;
    let (k, hh, hw) = match g.shape(f.hook) {
        &[1, k, hh, hw] => (k, hh, hw),
        s => {
            return Err(XaiError::Unsupported(format!(
                "hook `{}` has shape {s:?}, expected [1, C, h, w]",
                f.hook_name
            )))
        }
    };
    let seed = one_hot_rows(g.shape(f.logits), class)?;
    g.backward_with(f.logits, &seed, &BackwardRule::Standard)?;
    let plane = hh * hw;
    let act = g.value(f.hook).to_f64_vec();
    let grad = g.grad(f.hook).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; k * plane]);
    let mut cam = vec![0.0f64; plane];
    for ch in 0..k {
        let alpha = grad[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        for (o, a) in cam.iter_mut().zip(&act[ch * plane..(ch + 1) * plane]) {
            *o += alpha * a;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    Ok((cam, hh, hw))
}

/// GradCAM upsampled bilinearly to the input size.
pub fn gradcam<S: Scalar>(scorer: &impl Scorer<S>, x: &Tensor<S>, class: usize) -> Result<AttributionMap, XaiError> {
    let (_, h, w) = input_dims(x)?;
    let (cam, hh, hw) = gradcam_cells(scorer, x, class)?;
    AttributionMap::new(h, w, resize_bilinear_f64(&cam, hh, hw, h, w))
}

/// Input gradient with relus passing only positive gradient at positive
/// inputs, summed over channels.
pub fn guided_backprop<S: Scalar>(scorer: &impl Scorer<S>, x: &Tensor<S>, class: usize) -> Result<AttributionMap, XaiError> {
    let (c, h, w) = input_dims(x)?;
    let grad = batch_gradient(scorer, x.clone(), class, &BackwardRule::GuidedRelu)?;
    Ok(channel_sum(&grad, c, h, w))
}

/// Upsampled GradCAM times the guided-backprop map.
pub fn guided_gradcam<S: Scalar>(scorer: &impl Scorer<S>, x: &Tensor<S>, class: usize) -> Result<AttributionMap, XaiError> {
    let cam = gradcam(scorer, x, class)?;
    let guided = guided_backprop(scorer, x, class)?;
    let values = cam.values.iter().zip(&guided.values).map(|(a, b)| a * b).collect();
    AttributionMap::new(cam.height, cam.width, values)
}

/// DeepLIFT with the Rescale rule: multipliers from a backward pass that
/// compares every node with its value on the baseline, times `x − x′`.
pub fn deeplift<S: Scalar>(
    scorer: &impl Scorer<S>,
    x: &Tensor<S>,
    baseline: &Tensor<S>,
    class: usize,
    linearize_unsupported: bool,
) -> Result<AttributionMap, XaiError> {
    let (c, h, w) = input_dims(x)?;
    if baseline.shape() != x.shape() {
        return Err(XaiError::Shape(format!("baseline {:?} vs input {:?}", baseline.shape(), x.shape())));
    }
    let mut reference = Graph::new();
    let rv = reference.leaf(baseline.clone(), true);
    scorer.record(&mut reference, rv)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let f = scorer.record(&mut g, xv)?;
    let seed = one_hot_rows(g.shape(f.logits), class)?;
    let rule = BackwardRule::DeepLift {
        reference: &reference,
        linearize_unsupported,
    };
    g.backward_with(f.logits, &seed, &rule)?;
    let mult = g.grad(xv).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let attr: Vec<f64> = mult
        .iter()
        .zip(x.data().iter().zip(baseline.data()))
        .map(|(m, (a, b))| m * (a.widen() - b.widen()))
        .collect();
    Ok(channel_sum(&attr, c, h, w))
}
