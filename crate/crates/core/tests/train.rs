mod common;

use common::small_config;
use mammo_core::data::{build_dataset, DatasetConfig};
use mammo_core::enhance::{EnhanceConfig, EnhancementKind};
use mammo_core::models::{Model, ModelKind, ParamRole};
use mammo_core::tensor::{GradientMap, Graph, Tensor};
use mammo_core::train::{
    adamw_step, cross_entropy, evaluate, lr_schedule, prepare, train, AdamWState, PreparedData, TrainConfig, TrainError,
    TrainHistory,
};
use proptest::prelude::*;

fn tiny_data(side: usize, seed: u64) -> PreparedData {
    let ds = build_dataset(&DatasetConfig {
        benign: 16,
        malignant: 16,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap();
    prepare(&ds, EnhancementKind::Original, &EnhanceConfig::default(), side).unwrap()
}

fn ce_of(logits: &[f64], labels: &[usize]) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[labels.len(), 2], logits).unwrap());
    let l = cross_entropy(&mut g, x, labels, None).unwrap();
    g.value(l).data()[0]
}

#[test]
fn schedule_matches_step_decay_exactly() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0, &cfg), 0.001);
    assert_eq!(lr_schedule(6, &cfg), 0.001);
    assert_eq!(lr_schedule(7, &cfg), 0.0001);
    assert_eq!(lr_schedule(13, &cfg), 0.0001);
    assert_eq!(lr_schedule(14, &cfg), 0.00001);
}

#[test]
fn schedule_jumps_only_at_multiples_of_step() {
    let cfg = TrainConfig {
        gamma: 0.5,
        step: 3,
        ..TrainConfig::default()
    };
    for t in 1..30 {
        let changed = lr_schedule(t, &cfg) != lr_schedule(t - 1, &cfg);
        assert_eq!(changed, t % 3 == 0, "t = {t}");
    }
    let flat = TrainConfig {
        gamma: 1.0,
        ..TrainConfig::default()
    };
    assert!((0..40).all(|t| lr_schedule(t, &flat) == 0.001));
}

#[test]
fn cross_entropy_at_uniform_logits_is_ln2() {
    for label in 0..2 {
        assert!((ce_of(&[0.0, 0.0], &[label]) - 2f64.ln()).abs() < 1e-12);
    }
    // f32 path as well
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[3, 2]));
    let l = cross_entropy(&mut g, x, &[0, 1, 1], None).unwrap();
    assert!((g.value(l).data()[0] as f64 - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_hand_batch_and_limits() {
    // row 1: log(1 + e^-2) for label 0; row 2: log(1 + e^{1.5}) for label 0 of (−0.5, 1.0)
    let want = ((1.0 + (-2f64).exp()).ln() + (1.0 + 1.5f64.exp()).ln()) / 2.0;
    assert!((ce_of(&[2.0, 0.0, -0.5, 1.0], &[0, 0]) - want).abs() < 1e-6);
    assert!(ce_of(&[40.0, -40.0], &[0]) < 1e-30);
    assert!(ce_of(&[40.0, -40.0], &[1]) > 79.0);
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(
        cross_entropy(&mut g, x, &[2], None),
        Err(TrainError::Label { label: 2, classes: 2 })
    ));
}

fn grads_for(model: &Model<f64>, value: f64) -> GradientMap<f64> {
    let mut grads = GradientMap::new();
    for p in model.params() {
        if p.role.trainable() {
            grads.insert(p.name.clone(), Tensor::full(p.value.shape(), value));
        }
    }
    grads
}

fn model64() -> Model<f64> {
    Model::<f32>::build(ModelKind::BaseCnn, &small_config(ModelKind::BaseCnn, 3)).unwrap().cast()
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_fixed_point() {
    let mut m = model64();
    let before = m.clone();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let grads = grads_for(&m, 0.0);
    let mut st = AdamWState::new();
    for _ in 0..3 {
        adamw_step(&mut m, &grads, &mut st, 0.1, &cfg).unwrap();
    }
    assert_eq!(m, before);
    assert_eq!(st.step(), 3);
}

#[test]
fn adamw_first_step_is_lr_times_sign() {
    for g in [3.0, -0.02, 1e-3] {
        let mut m = model64();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let before = m.param("fc2.bias").unwrap().value.data()[0];
        let grads = grads_for(&m, g);
        adamw_step(&mut m, &grads, &mut AdamWState::new(), 0.01, &cfg).unwrap();
        let after = m.param("fc2.bias").unwrap().value.data()[0];
        // |g| / (|g| + eps) with eps = 1e-8
        let want = -0.01 * g.signum() * g.abs() / (g.abs() + 1e-8);
        assert!((after - before - want).abs() < 1e-12, "g = {g}");
    }
}

#[test]
fn adamw_decay_hits_weights_only() {
    let mut m = model64();
    let before = m.clone();
    let cfg = TrainConfig {
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    let grads = grads_for(&m, 0.0);
    adamw_step(&mut m, &grads, &mut AdamWState::new(), 0.1, &cfg).unwrap();
    for (p, q) in m.params().iter().zip(before.params()) {
        for (a, b) in p.value.data().iter().zip(q.value.data()) {
            let want = if p.role == ParamRole::Weight { 0.999 * b } else { *b };
            assert!((a - want).abs() <= 1e-15 * b.abs().max(1.0), "{}", p.name);
        }
    }
}

#[test]
fn adamw_requires_every_gradient() {
    let mut m = model64();
    let mut grads = grads_for(&m, 1.0);
    let mut all = GradientMap::new();
    for (k, v) in grads.iter() {
        if k != "fc1.weight" {
            all.insert(k, v.clone());
        }
    }
    grads = all;
    let before = m.clone();
    let err = adamw_step(&mut m, &grads, &mut AdamWState::new(), 0.1, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::MissingGradient(ref n) if n == "fc1.weight"));
    assert_eq!(m, before, "a failed step must not touch parameters");
}

#[test]
fn adamw_moments_follow_the_recurrence() {
    let mut m = model64();
    let cfg = TrainConfig::default();
    let mut st = AdamWState::new();
    let (up, down) = (grads_for(&m, 2.0), grads_for(&m, -1.0));
    adamw_step(&mut m, &up, &mut st, 1e-3, &cfg).unwrap();
    adamw_step(&mut m, &down, &mut st, 1e-3, &cfg).unwrap();
    let (mo, v) = st.moments("fc2.bias").unwrap();
    let m_want = 0.9 * (0.1 * 2.0) + 0.1 * -1.0;
    let v_want = 0.999 * (0.001 * 4.0) + 0.001 * 1.0;
    assert!((mo[0] - m_want).abs() < 1e-15);
    assert!((v[0] - v_want).abs() < 1e-15);
    assert_eq!(mo.len(), m.param("fc2.bias").unwrap().value.numel());
}

fn batch_loss(m: &Model<f32>, x: &Tensor<f32>, labels: &[usize]) -> (f64, GradientMap<f32>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let f = m.forward(&mut g, xv, true).unwrap();
    let l = cross_entropy(&mut g, f.logits, labels, None).unwrap();
    let v = g.value(l).data()[0] as f64;
    (v, g.backward(l).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn one_adamw_step_does_not_increase_the_batch_loss(seed in 0u64..1000, kind_tag in 0u8..2, lr_exp in 4i32..7) {
        let kind = [ModelKind::BaseCnn, ModelKind::ResNetLite][kind_tag as usize];
        let lr = 10f64.powi(-lr_exp + 1).min(1e-3);
        let data = tiny_data(32, seed);
        let idx: Vec<usize> = (0..8).collect();
        let x = data.train.batch::<f32>(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
        let mut m = Model::<f32>::build(kind, &small_config(kind, seed)).unwrap();
        let (before, grads) = batch_loss(&m, &x, &labels);
        adamw_step(&mut m, &grads, &mut AdamWState::new(), lr, &TrainConfig::default()).unwrap();
        let (after, _) = batch_loss(&m, &x, &labels);
        prop_assert!(after <= before + 1e-6, "{before} -> {after} at lr {lr}");
    }

    #[test]
    fn selection_prefers_the_earliest_maximum(accs in prop::collection::vec(0u8..5, 1..12)) {
        let accs: Vec<f64> = accs.iter().map(|&a| a as f64 / 4.0).collect();
        let best = TrainHistory::select_best(&accs).unwrap();
        let max = accs.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(accs[best], max);
        prop_assert!(accs[..best].iter().all(|&a| a < max));
    }
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = tiny_data(32, 9);
    let m = Model::<f32>::build(ModelKind::BaseCnn, &small_config(ModelKind::BaseCnn, 1)).unwrap();
    let (a, ha) = train(m.clone(), &data, &quick_cfg(3)).unwrap();
    let (b, hb) = train(m, &data, &quick_cfg(3)).unwrap();
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert_eq!(ha, hb);
    assert_eq!(a, b);
}

#[test]
fn returned_model_is_the_best_validation_epoch() {
    let data = tiny_data(32, 2);
    let m = Model::<f32>::build(ModelKind::BaseCnn, &small_config(ModelKind::BaseCnn, 2)).unwrap();
    let (best, h) = train(m, &data, &quick_cfg(4)).unwrap();
    let accs: Vec<f64> = h.epochs.iter().map(|r| r.val_acc).collect();
    assert_eq!(h.best_epoch, TrainHistory::select_best(&accs).unwrap());
    assert_eq!(h.best_val_accuracy, accs.iter().cloned().fold(f64::MIN, f64::max));
    assert_eq!(evaluate(&best, &data.val, 8).unwrap().accuracy, h.best_val_accuracy);
    assert_eq!(h.epochs.len(), 4);
    assert!(h.epochs.iter().all(|r| r.train_loss >= 0.0 && r.val_loss >= 0.0));
}

#[test]
fn history_csv_layout() {
    let data = tiny_data(32, 4);
    let m = Model::<f32>::build(ModelKind::BaseCnn, &small_config(ModelKind::BaseCnn, 4)).unwrap();
    let (_, h) = train(m, &data, &quick_cfg(2)).unwrap();
    let csv = h.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,train_acc,val_loss,val_acc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,0.001,"));
    assert_eq!(lines[2].split(',').count(), 6);
}

#[test]
fn empty_splits_are_rejected() {
    let mut data = tiny_data(32, 1);
    let m = Model::<f32>::build(ModelKind::BaseCnn, &small_config(ModelKind::BaseCnn, 1)).unwrap();
    data.val = Default::default();
    assert!(matches!(train(m.clone(), &data, &quick_cfg(1)), Err(TrainError::EmptySplit("val"))));
    data.train = Default::default();
    assert!(matches!(train(m, &data, &quick_cfg(1)), Err(TrainError::EmptySplit("train"))));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { gamma: 0.0, ..TrainConfig::default() },
        TrainConfig { gamma: 1.5, ..TrainConfig::default() },
        TrainConfig { step: 0, ..TrainConfig::default() },
        TrainConfig { lr0: 0.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))), "{cfg:?}");
    }
}

#[test]
fn normalization_is_fit_on_train_only() {
    let data = tiny_data(32, 6);
    let mean: f64 = data.train.inputs.iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).sum::<f64>()
        / (data.train.len() * 32 * 32) as f64;
    assert!(mean.abs() < 1e-4, "train mean after standardization {mean}");
    assert_eq!(data.train.inputs[0].shape(), &[1, 32, 32]);
    assert_eq!(data.train.batch::<f32>(&[0, 1, 2]).shape(), &[3, 1, 32, 32]);
}
