mod common;

use common::{case, randn, rng, PRIMITIVES};
use mammo_core::tensor::{finite_diff_grad, max_relative_error, primitive_grad_error, Graph, Tensor};
use proptest::prelude::*;

const EPS: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

fn probe_for(out_shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(&mut rng(seed ^ 0x9e37_79b9), out_shape, 1.0)
}

fn out_shape(c: &common::Case) -> Vec<usize> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<_> = c.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = g.apply(c.prim.clone(), &vars).unwrap();
    g.shape(y).to_vec()
}

#[test]
fn every_primitive_matches_central_differences() {
    for name in PRIMITIVES {
        let mut worst = 0.0f64;
        for seed in 0..100u64 {
            let c = case(name, seed);
            let probe = probe_for(&out_shape(&c), seed);
            let err = primitive_grad_error(&c.prim, &c.inputs, &c.differentiate, &probe, EPS, FLOOR)
                .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
            worst = worst.max(err);
        }
        assert!(worst < 1e-3, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let r = &mut rng(7);
    let x = randn(r, &[4, 6], 1.0);
    let w1 = randn(r, &[6, 8], 0.5);
    let b1 = randn(r, &[8], 0.1);
    let w2 = randn(r, &[8, 3], 0.5);
    let labels = [0usize, 2, 1, 2];
    let loss_of = |w1v: &Tensor<f64>| -> f64 {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let w1 = g.constant(w1v.clone());
        let b1 = g.constant(b1.clone());
        let w2 = g.constant(w2.clone());
        let h = g.matmul(xv, w1).unwrap();
        let h = g.add(h, b1).unwrap();
        let h = g.relu(h).unwrap();
        let o = g.matmul(h, w2).unwrap();
        let l = g.cross_entropy(o, &labels, None).unwrap();
        g.value(l).data()[0]
    };
    let w1_32 = w1.cast::<f32>();
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.cast());
    let w1v = g.named_leaf("w1", w1_32.clone(), true);
    let b1v = g.constant(b1.cast());
    let w2v = g.constant(w2.cast());
    let h = g.matmul(xv, w1v).unwrap();
    let h = g.add(h, b1v).unwrap();
    let h = g.relu(h).unwrap();
    let o = g.matmul(h, w2v).unwrap();
    let l = g.cross_entropy(o, &labels, None).unwrap();
    let grads = g.backward(l).unwrap();
    let numeric = finite_diff_grad(loss_of, &w1_32.cast(), 1e-3);
    let err = max_relative_error(&grads.get("w1").unwrap().to_f64_vec(), &numeric.to_f64_vec(), FLOOR);
    assert!(err < 1e-3, "{err:e}");
}

#[test]
fn conv_relu_pool_linear_chain_matches_finite_differences() {
    let r = &mut rng(11);
    let x = randn(r, &[1, 1, 6, 6], 1.0);
    let w = randn(r, &[2, 1, 3, 3], 0.5);
    let lin = randn(r, &[8, 2], 0.5);
    let forward = |g: &mut Graph<f64>, wv: mammo_core::Var| {
        let xv = g.constant(x.clone());
        let l = g.constant(lin.clone());
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.max_pool2d(y, 3, 3).unwrap();
        let y = g.flatten(y).unwrap();
        let y = g.matmul(y, l).unwrap();
        g.sum(y).unwrap()
    };
    let mut g = Graph::<f64>::new();
    let wv = g.named_leaf("w", w.clone(), true);
    let out = forward(&mut g, wv);
    let grads = g.backward(out).unwrap();
    let numeric = finite_diff_grad(
        |t: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let wv = g.constant(t.clone());
            let out = forward(&mut g, wv);
            g.value(out).data()[0]
        },
        &w,
        1e-6,
    );
    let err = max_relative_error(&grads.get("w").unwrap().to_f64_vec(), &numeric.to_f64_vec(), FLOOR);
    assert!(err < 1e-3, "{err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(seed in 0u64..10_000, n in 1usize..12, scale in 0.1f64..30.0) {
        let x = randn(&mut rng(seed), &[3, n], scale);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.cast());
        let y = g.softmax(xv).unwrap();
        for row in g.value(y).data().chunks(n) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(seed in 0u64..10_000, n in 2usize..32, scale in 0.5f64..20.0) {
        let x = randn(&mut rng(seed), &[4, n], scale);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.cast());
        let gamma = g.constant(Tensor::full(&[n], 1.0));
        let beta = g.constant(Tensor::zeros(&[n]));
        let y = g.layer_norm(xv, gamma, beta, 1e-12).unwrap();
        for row in g.value(y).data().chunks(n) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn graph_replay_is_bit_identical(seed in 0u64..10_000) {
        let run = || {
            let c = case(PRIMITIVES[(seed % PRIMITIVES.len() as u64) as usize], seed);
            let mut g = Graph::<f32>::new();
            let vars: Vec<_> = c.inputs.iter().map(|t| g.leaf(t.cast(), true)).collect();
            let y = g.apply(c.prim.clone(), &vars).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            let mut bits: Vec<u32> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
            for v in &vars {
                if let Some(gr) = g.grad(*v) {
                    bits.extend(gr.data().iter().map(|v| v.to_bits()));
                }
            }
            bits
        };
        prop_assert_eq!(run(), run());
    }
}
