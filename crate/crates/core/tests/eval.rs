use mammo_core::eval::{
    confusion, curve_csv, metrics, metrics_csv_row, pr_curve, roc_auc, ConfusionMatrix, EvalError, Metrics,
};
use proptest::prelude::*;

/// Probability that a random positive outscores a random negative, ties ½.
fn mann_whitney(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn cm(tp: usize, fp: usize, tn: usize, fn_: usize) -> ConfusionMatrix {
    ConfusionMatrix { tp, fp, tn, fn_ }
}

#[test]
fn confusion_examples() {
    let labels: Vec<usize> = [1; 4].into_iter().chain([0; 6]).collect();
    assert_eq!(confusion(&labels, &labels).unwrap(), cm(4, 0, 6, 0));
    assert_eq!(confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), cm(1, 1, 1, 1));
    assert_eq!(confusion(&[0; 7], &[1; 7]).unwrap().fn_, 7);
}

#[test]
fn confusion_errors() {
    assert_eq!(confusion(&[1, 0], &[1]), Err(EvalError::LengthMismatch(2, 1)));
    assert_eq!(confusion(&[], &[]), Err(EvalError::Empty));
    assert_eq!(confusion(&[2], &[1]), Err(EvalError::Label(2)));
}

#[test]
fn metric_examples() {
    let m = metrics(&cm(1, 1, 1, 1));
    assert_eq!(m, Metrics {
        accuracy: Some(0.5),
        precision: Some(0.5),
        recall: Some(0.5),
        f1: Some(0.5)
    });
    let m = metrics(&cm(3, 0, 5, 0));
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (Some(1.0), Some(1.0), Some(1.0), Some(1.0)));
    let m = metrics(&cm(0, 0, 5, 2));
    assert_eq!(m.precision, None);
    assert_eq!(m.recall, Some(0.0));
    assert_eq!(m.f1, None);
    assert_eq!(metrics(&cm(0, 2, 5, 0)).recall, None);
}

#[test]
fn f1_is_the_harmonic_mean() {
    let m = metrics(&cm(7, 3, 4, 2));
    let (p, r) = (0.7, 7.0 / 9.0);
    assert!((m.f1.unwrap() - 2.0 / (1.0 / p + 1.0 / r)).abs() < 1e-15);
}

#[test]
fn roc_examples() {
    let r = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
    assert_eq!(r.auc, 1.0);
    assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
    assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
    let r = roc_auc(&[0.3; 5], &[0, 1, 1, 0, 1]).unwrap();
    assert_eq!(r.auc, 0.5);
    assert_eq!(r.points, vec![(0.0, 0.0), (1.0, 1.0)]);
}

#[test]
fn roc_six_sample_hand_case() {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.7, 0.4];
    let labels = [0, 0, 1, 1, 0, 1];
    // positives 0.35, 0.8, 0.4 against negatives 0.1, 0.4, 0.7: 1 + 3 + 1.5 wins of 9
    let want = 5.5 / 9.0;
    assert!((mann_whitney(&scores, &labels) - want).abs() < 1e-15);
    assert!((roc_auc(&scores, &labels).unwrap().auc - want).abs() < 1e-12);
}

#[test]
fn roc_requires_both_classes() {
    assert_eq!(roc_auc(&[0.1, 0.9], &[1, 1]), Err(EvalError::SingleClass));
    assert_eq!(roc_auc(&[0.1, 0.9], &[0, 0]), Err(EvalError::SingleClass));
    assert!(matches!(roc_auc(&[f64::NAN, 0.9], &[0, 1]), Err(EvalError::Score(_))));
}

#[test]
fn pr_examples() {
    let perfect = pr_curve(&[0.9, 0.8, 0.2], &[1, 1, 0]).unwrap();
    assert!(perfect.contains(&(1.0, 1.0)));
    assert_eq!(pr_curve(&[0.5; 4], &[1, 0, 0, 0]).unwrap(), vec![(1.0, 0.25)]);
    let hand = pr_curve(&[0.9, 0.8, 0.7, 0.6, 0.5], &[1, 0, 1, 1, 0]).unwrap();
    let want = [(1.0 / 3.0, 1.0), (1.0 / 3.0, 0.5), (2.0 / 3.0, 2.0 / 3.0), (1.0, 0.75), (1.0, 0.6)];
    assert_eq!(hand.len(), want.len());
    for (a, b) in hand.iter().zip(want) {
        assert!((a.0 - b.0).abs() < 1e-15 && (a.1 - b.1).abs() < 1e-15, "{a:?} vs {b:?}");
    }
    assert_eq!(pr_curve(&[0.2, 0.4], &[0, 0]), Err(EvalError::NoPositives));
}

#[test]
fn csv_rows() {
    let m = metrics(&cm(0, 0, 5, 2));
    assert_eq!(
        metrics_csv_row("ViTLite", "hog", &m, Some(0.75)),
        "ViTLite,hog,0.714286,NA,0.000000,NA,0.750000"
    );
    assert_eq!(curve_csv(("fpr", "tpr"), &[(0.0, 0.0), (1.0, 0.5)]), "fpr,tpr\n0,0\n1,0.5\n");
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    prop::collection::vec((0u8..12, 0usize..2), 2..60).prop_filter_map("both classes", |v| {
        let labels: Vec<usize> = v.iter().map(|p| p.1).collect();
        (labels.contains(&0) && labels.contains(&1)).then(|| (v.iter().map(|p| p.0 as f64 / 11.0).collect(), labels))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_equals_the_rank_statistic((scores, labels) in scored()) {
        let auc = roc_auc(&scores, &labels).unwrap().auc;
        prop_assert!((auc - mann_whitney(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn pr_recall_never_decreases_as_threshold_falls((scores, labels) in scored()) {
        let c = pr_curve(&scores, &labels).unwrap();
        prop_assert!(c.windows(2).all(|w| w[0].0 <= w[1].0));
        prop_assert_eq!(c.last().unwrap().0, 1.0);
    }

    #[test]
    fn metrics_ignore_sample_order(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..40), rot in 0usize..40) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let k = rot % p.len();
        let (mut p2, mut l2) = (p.clone(), l.clone());
        p2.rotate_left(k);
        l2.rotate_left(k);
        p2.reverse();
        l2.reverse();
        prop_assert_eq!(confusion(&p, &l).unwrap(), confusion(&p2, &l2).unwrap());
    }

    #[test]
    fn accuracy_mixes_recall_and_specificity(tp in 0usize..30, fp in 0usize..30, tn in 0usize..30, fn_ in 0usize..30) {
        let c = cm(tp, fp, tn, fn_);
        prop_assume!(tp + fn_ > 0 && tn + fp > 0);
        let n = c.total() as f64;
        let prevalence = (tp + fn_) as f64 / n;
        let specificity = tn as f64 / (tn + fp) as f64;
        let m = metrics(&c);
        let mixed = prevalence * m.recall.unwrap() + (1.0 - prevalence) * specificity;
        prop_assert!((m.accuracy.unwrap() - mixed).abs() < 1e-12);
    }
}
