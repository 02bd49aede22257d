#![allow(dead_code)]

use mammo_core::tensor::Tensor;
use mammo_core::Primitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type T64 = Tensor<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> T64 {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// One randomized gradient-check case.
pub struct Case {
    pub prim: Primitive,
    pub inputs: Vec<T64>,
    pub differentiate: Vec<bool>,
}

pub const PRIMITIVES: [&str; 24] = [
    "add",
    "mul",
    "scale",
    "matmul",
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "batch_norm_inference_style",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "flatten",
    "reshape",
    "transpose",
    "concat",
    "embedding_add",
    "dropout_identity",
    "roll",
    "sum",
    "softmax_cross_entropy",
];

/// Seeded random case for the named primitive; shapes and attributes vary
/// with the seed.
pub fn case(name: &str, seed: u64) -> Case {
    let r = &mut rng(seed);
    let b = r.gen_range(1..=2);
    let all = |n: usize| vec![true; n];
    let (prim, inputs, differentiate) = match name {
        "add" | "mul" => {
            let a = randn(r, &[b, 3, 4], 1.0);
            let rhs = if r.gen_bool(0.5) {
                randn(r, &[b, 3, 4], 1.0)
            } else {
                randn(r, &[4], 1.0)
            };
            let p = if name == "add" { Primitive::Add } else { Primitive::Mul };
            (p, vec![a, rhs], all(2))
        }
        "scale" => (Primitive::Scale(r.gen_range(-2.0..2.0)), vec![randn(r, &[b, 5], 1.0)], all(1)),
        "matmul" => {
            let (m, k, n) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..4));
            let a = randn(r, &[b, m, k], 1.0);
            let rhs = if r.gen_bool(0.5) {
                randn(r, &[k, n], 1.0)
            } else {
                randn(r, &[b, k, n], 1.0)
            };
            (Primitive::MatMul, vec![a, rhs], all(2))
        }
        "conv2d" => {
            let (ci, co) = (r.gen_range(1..3), r.gen_range(1..4));
            let k = r.gen_range(1..=3);
            let stride = r.gen_range(1..=2);
            let pad = r.gen_range(0..=1);
            let x = randn(r, &[b, ci, 5, 5], 1.0);
            let w = randn(r, &[co, ci, k, k], 1.0);
            let mut ins = vec![x, w];
            if r.gen_bool(0.5) {
                ins.push(randn(r, &[co], 1.0));
            }
            let n = ins.len();
            (Primitive::Conv2d { stride, pad }, ins, all(n))
        }
        "depthwise_conv2d" => {
            let c = r.gen_range(1..4);
            let k = [1, 3, 5][r.gen_range(0..3)];
            let stride = r.gen_range(1..=2);
            let pad = k / 2;
            let x = randn(r, &[b, c, 6, 6], 1.0);
            let w = randn(r, &[c, 1, k, k], 1.0);
            let bias = randn(r, &[c], 1.0);
            (Primitive::DepthwiseConv2d { stride, pad }, vec![x, w, bias], all(3))
        }
        "pointwise_conv2d" => {
            let (ci, co) = (r.gen_range(1..4), r.gen_range(1..4));
            let x = randn(r, &[b, ci, 3, 4], 1.0);
            let w = randn(r, &[co, ci, 1, 1], 1.0);
            (Primitive::PointwiseConv2d, vec![x, w], all(2))
        }
        "relu" => (Primitive::Relu, vec![randn(r, &[b, 7], 1.0)], all(1)),
        "gelu" => (Primitive::Gelu, vec![randn(r, &[b, 7], 3.0)], all(1)),
        "softmax" => (Primitive::Softmax, vec![randn(r, &[b, 3, 5], 2.0)], all(1)),
        "layer_norm" => {
            let n = r.gen_range(2..8);
            let x = randn(r, &[b, 3, n], 1.0);
            let g = uniform(r, &[n], 0.5, 1.5);
            let be = randn(r, &[n], 0.5);
            (Primitive::LayerNorm { eps: 1e-5 }, vec![x, g, be], all(3))
        }
        "batch_norm_inference_style" => {
            let c = r.gen_range(1..4);
            let x = randn(r, &[b, c, 3, 3], 1.0);
            let g = uniform(r, &[c], 0.5, 1.5);
            let be = randn(r, &[c], 0.5);
            let mean = randn(r, &[c], 0.5);
            let var = uniform(r, &[c], 0.5, 1.5);
            (
                Primitive::BatchNormInference { eps: 1e-5 },
                vec![x, g, be, mean, var],
                vec![true, true, true, false, false],
            )
        }
        "max_pool2d" | "avg_pool2d" => {
            let (kernel, stride) = [(2, 2), (3, 2), (2, 1)][r.gen_range(0..3)];
            let x = randn(r, &[b, 2, 6, 6], 1.0);
            let p = if name == "max_pool2d" {
                Primitive::MaxPool2d { kernel, stride }
            } else {
                Primitive::AvgPool2d { kernel, stride }
            };
            (p, vec![x], all(1))
        }
        "global_avg_pool" => (Primitive::GlobalAvgPool, vec![randn(r, &[b, 3, 4, 4], 1.0)], all(1)),
        "flatten" => (Primitive::Flatten, vec![randn(r, &[b, 2, 3, 2], 1.0)], all(1)),
        "reshape" => (Primitive::Reshape(vec![b * 3, 4]), vec![randn(r, &[b, 4, 3], 1.0)], all(1)),
        "transpose" => {
            let mut perm = vec![0usize, 1, 2, 3];
            for i in (1..4).rev() {
                let j = r.gen_range(0..=i);
                perm.swap(i, j);
            }
            (Primitive::Transpose(perm), vec![randn(r, &[b, 2, 3, 4], 1.0)], all(1))
        }
        "concat" => {
            let axis = r.gen_range(0..3);
            let mut s1 = vec![b, 2, 3];
            let mut s2 = s1.clone();
            s1[axis] += r.gen_range(0..2);
            s2[axis] += r.gen_range(0..3);
            let ins = vec![randn(r, &s1, 1.0), randn(r, &s2, 1.0)];
            (Primitive::Concat { axis }, ins, all(2))
        }
        "embedding_add" => {
            let x = randn(r, &[b, 5, 4], 1.0);
            let pos = randn(r, &[5, 4], 0.1);
            (Primitive::EmbeddingAdd, vec![x, pos], all(2))
        }
        "dropout_identity" => (Primitive::DropoutIdentity, vec![randn(r, &[b, 6], 1.0)], all(1)),
        "roll" => {
            let axis = r.gen_range(0..3);
            let shift = r.gen_range(-4..=4);
            (Primitive::Roll { axis, shift }, vec![randn(r, &[b, 4, 5], 1.0)], all(1))
        }
        "sum" => (Primitive::Sum, vec![randn(r, &[b, 3, 2], 1.0)], all(1)),
        "softmax_cross_entropy" => {
            let classes = r.gen_range(2..5);
            let n = b + 2;
            let labels = (0..n).map(|_| r.gen_range(0..classes)).collect();
            let class_weights = if r.gen_bool(0.3) {
                Some((0..classes).map(|_| r.gen_range(0.5..2.0)).collect())
            } else {
                None
            };
            (
                Primitive::SoftmaxCrossEntropy { labels, class_weights },
                vec![randn(r, &[n, classes], 2.0)],
                all(1),
            )
        }
        other => panic!("no case generator for {other}"),
    };
    Case {
        prim,
        inputs,
        differentiate,
    }
}

pub mod oracles;

pub fn random_image(seed: u64, w: usize, h: usize) -> mammo_core::ImageGray {
    let r = &mut rng(seed);
    mammo_core::ImageGray::from_fn(w, h, |_, _| r.gen())
}

/// Config at input side 32 with default widths, small enough for
/// coordinate-wise finite differences.
pub fn small_config(kind: mammo_core::ModelKind, seed: u64) -> mammo_core::ModelConfig {
    mammo_core::ModelConfig {
        input_side: 32,
        seed,
        ..mammo_core::ModelConfig::default_for(kind)
    }
}

/// Largest relative error between the analytic gradient of the
/// malignant-class logit, computed in precision `S`, and `f64` central
/// differences of the same model, over `per_tensor` random coordinates of
/// the input and of every trainable parameter tensor.
pub fn model_grad_error<S: mammo_core::Scalar>(kind: mammo_core::ModelKind, seed: u64, per_tensor: usize) -> f64 {
    use mammo_core::models::Model;
    use mammo_core::tensor::{finite_diff_coords, max_relative_error, Graph};

    let cfg = small_config(kind, seed);
    let m32: Model<f32> = Model::build(kind, &cfg).unwrap();
    let model: Model<S> = m32.cast();
    let mut r = rng(seed ^ 0xfd);
    let side = cfg.input_side;
    // f32-representable input so both precisions see the same point
    let x64: T64 = randn(&mut r, &[1, 1, side, side], 1.0).cast::<f32>().cast();
    let mut probe = vec![0.0; cfg.num_classes];
    probe[1] = 1.0;

    let mut g = Graph::<S>::new();
    let xv = g.leaf(x64.cast(), true);
    let f = model.forward(&mut g, xv, true).unwrap();
    let pv = g.constant(Tensor::from_f64(&[1, cfg.num_classes], &probe).unwrap());
    let prod = g.mul(f.logits, pv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let gx = g.grad(xv).unwrap();

    let m64: Model<f64> = m32.cast();
    let objective = |model: &Model<f64>, x: &T64| -> f64 {
        let out = model.predict(x).unwrap();
        out.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let pick = |r: &mut ChaCha8Rng, n: usize| -> Vec<usize> { (0..per_tensor.min(n)).map(|_| r.gen_range(0..n)).collect() };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let coords = pick(&mut r, x64.numel());
    analytic.extend(coords.iter().map(|&i| mammo_core::Scalar::widen(gx.data()[i])));
    numeric.extend(finite_diff_coords(|x| objective(&m64, x), &x64, EPS, &coords));

    for p in m64.params() {
        if !p.role.trainable() {
            continue;
        }
        let grad = grads.get(&p.name).unwrap_or_else(|| panic!("no gradient for {}", p.name));
        let coords = pick(&mut r, p.value.numel());
        analytic.extend(coords.iter().map(|&i| mammo_core::Scalar::widen(grad.data()[i])));
        let mut probe_model = m64.clone();
        let name = p.name.clone();
        numeric.extend(finite_diff_coords(
            |v| {
                probe_model.param_mut(&name).unwrap().value = v.clone();
                objective(&probe_model, &x64)
            },
            &p.value,
            EPS,
            &coords,
        ));
    }
    max_relative_error(&analytic, &numeric, FLOOR)
}

pub const EPS: f64 = 1e-6;
pub const FLOOR: f64 = 1e-6;
