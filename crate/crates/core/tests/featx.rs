use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xtrap::dataset::{
    one_hot, BundleHeader, DatasetBundle, EnvInfo, LabeledSample, Split, Subject, TaskKind,
};
use xtrap::featx::{
    extrapolate_row, featx_augment, generalized_modulo, hard_mask, sample_lambda, soft_mask, variance_scores,
    FeatxError,
};
use xtrap::graph::Graph;
use xtrap::harness::{train, Method, RunConfig};
use xtrap::synth::{generate, GenConfig, GenTask};

fn one_node(value: f64, label: usize, env: usize) -> LabeledSample {
    let g = Graph::new(1, vec![], array![[value]], None).unwrap();
    LabeledSample {
        subject: Subject::Graph(g),
        label: one_hot(label, 2),
        env,
        split: Split::Train,
        meta: None,
    }
}

/// Four one-node graphs with labels {0,0,1,1}, environments {0,1,0,1}
/// and the given feature values.
fn four_samples(values: [f64; 4]) -> DatasetBundle {
    let labels = [0, 0, 1, 1];
    let envs = [0, 1, 0, 1];
    DatasetBundle {
        header: BundleHeader {
            p: 1,
            q: 0,
            num_classes: 2,
            task: TaskKind::Graph,
            shift: None,
            domain: vec![(0.0, 2.0)],
            envs: vec![
                EnvInfo { id: 0, name: "a".into() },
                EnvInfo { id: 1, name: "b".into() },
            ],
            graph: None,
        },
        samples: (0..4).map(|k| one_node(values[k], labels[k], envs[k])).collect(),
    }
}

#[test]
fn environment_indicator_feature_scores_positive() {
    let b = four_samples([0.0, 1.0, 0.0, 1.0]);
    for (k1, k2) in [(1.0, 1.0), (2.0, 0.5)] {
        let s = variance_scores(&b, k1, k2).unwrap();
        assert!((s[0] - 0.25 * k1).abs() < 1e-15, "{s:?}");
    }
}

#[test]
fn label_indicator_feature_scores_negative() {
    let b = four_samples([0.0, 0.0, 1.0, 1.0]);
    let s = variance_scores(&b, 1.0, 3.0).unwrap();
    assert!((s[0] + 0.25 * 3.0).abs() < 1e-15, "{s:?}");
}

#[test]
fn constant_feature_scores_zero() {
    let b = four_samples([0.7; 4]);
    assert_eq!(variance_scores(&b, 5.0, 2.0).unwrap(), vec![0.0]);
}

#[test]
fn singleton_group_is_degenerate() {
    let mut b = four_samples([0.0, 1.0, 0.0, 1.0]);
    b.samples.truncate(3);
    assert!(matches!(variance_scores(&b, 1.0, 1.0), Err(FeatxError::DegenerateGroups(_))));
}

#[test]
fn threshold_extremes_give_full_and_empty_masks() {
    let s = [0.3, -0.2, 1.5];
    assert_eq!(hard_mask(&s, -1.0), vec![true; 3]);
    assert_eq!(hard_mask(&s, 2.0), vec![false; 3]);
    assert_eq!(hard_mask(&[0.25, -0.25], 0.0), vec![true, false]);
    let soft = soft_mask(&s, 0.0, 0.1);
    assert!(soft.iter().all(|&m| m > 0.0 && m < 1.0));
    assert!(soft[2] > soft[0] && soft[0] > soft[1]);
}

#[test]
fn modulo_hand_cases() {
    assert!((generalized_modulo(&[1.3], &[(0.0, 1.0)])[0] - 0.3).abs() < 1e-9);
    assert_eq!(generalized_modulo(&[0.5], &[(0.0, 1.0)])[0], 0.5);
    assert!((generalized_modulo(&[-1.5], &[(-1.0, 1.0)])[0] - 0.5).abs() < 1e-9);
    // Half-open: the upper end maps to the lower end.
    assert_eq!(generalized_modulo(&[1.0], &[(0.0, 1.0)])[0], 0.0);
}

#[test]
fn extrapolation_hand_case() {
    let y = extrapolate_row(&[0.8], &[0.2], &[true], 1.0, 1.0, &[(0.0, 1.0)]);
    assert!((y[0] - 0.4).abs() < 1e-12);
}

fn pair() -> (LabeledSample, LabeledSample, Array2<f64>) {
    let g = Graph::new(3, vec![(0, 1), (1, 2)], array![[0.1, 0.9], [0.5, 0.2], [0.3, 0.3]], None).unwrap();
    let x1 = g.node_features().clone();
    let s1 = LabeledSample {
        subject: Subject::Graph(g),
        label: one_hot(1, 2),
        env: 0,
        split: Split::Train,
        meta: None,
    };
    let mut s2 = s1.clone();
    s2.env = 1;
    (s1, s2, x1)
}

#[test]
fn zero_weights_or_empty_mask_reproduce_input() {
    let (s1, s2, x1) = pair();
    let d = [(0.0, 1.0), (0.0, 1.0)];
    let (_, same) = featx_augment(&s1, &x1, &s2, &[0.7, 0.4], &[true, true], 0.0, 0.0, &d, 9).unwrap();
    assert_eq!(same, x1);
    let (_, masked) = featx_augment(&s1, &x1, &s2, &[0.7, 0.4], &[false, false], 3.0, 3.0, &d, 9).unwrap();
    assert_eq!(masked, x1);
}

#[test]
fn augmentation_keeps_structure_label_and_invariant_columns() {
    let (s1, s2, x1) = pair();
    let d = [(0.0, 1.0), (0.0, 1.0)];
    let (out, x) = featx_augment(&s1, &x1, &s2, &[0.7, 0.4], &[true, false], 1.7, 1.7, &d, 9).unwrap();
    let (g_in, g_out) = (s1.graph().unwrap(), out.graph().unwrap());
    assert_eq!(g_in.edges(), g_out.edges());
    assert_eq!(g_out.node_features(), &x);
    assert_eq!(out.label, s1.label);
    assert_eq!(out.env, 9);
    assert_eq!(x.column(1), x1.column(1));
    assert_ne!(x.column(0), x1.column(0));
}

#[test]
fn mismatched_pairs_are_rejected() {
    let (s1, s2, x1) = pair();
    let d = [(0.0, 1.0), (0.0, 1.0)];
    let mut other_label = s2.clone();
    other_label.label = one_hot(0, 2);
    assert_eq!(
        featx_augment(&s1, &x1, &other_label, &[0.0, 0.0], &[true, true], 1.0, 1.0, &d, 9).unwrap_err(),
        FeatxError::LabelMismatch
    );
    assert_eq!(
        featx_augment(&s1, &x1, &s1, &[0.0, 0.0], &[true, true], 1.0, 1.0, &d, 9).unwrap_err(),
        FeatxError::SameEnvironment
    );
}

#[test]
fn gamma_draws_match_moments_and_are_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| sample_lambda(2.0, 1.0, &mut rng)).collect();
    assert!(draws.iter().all(|&l| l > 0.0));
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!((mean - 2.0).abs() / 2.0 < 0.02, "{mean}");
    let mut again = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(sample_lambda(2.0, 1.0, &mut again), draws[0]);
}

proptest! {
    #[test]
    fn modulo_lands_in_domain_by_whole_periods(x in -1e4f64..1e4, lo in -10f64..10.0, len in 1e-3f64..20.0) {
        let hi = lo + len;
        let y = generalized_modulo(&[x], &[(lo, hi)])[0];
        prop_assert!(lo <= y && y < hi);
        let k = ((y - x) / len).round();
        prop_assert!(((y - x) - k * len).abs() <= 1e-7 * (1.0 + x.abs()));
    }

    #[test]
    fn modulo_is_identity_inside_domain(t in 0f64..1.0, lo in -5f64..5.0, len in 0.1f64..10.0) {
        let x = lo + t * len * 0.999;
        prop_assert_eq!(generalized_modulo(&[x], &[(lo, lo + len)])[0], x);
    }

    #[test]
    fn extrapolated_rows_stay_in_domain_and_keep_unmasked_columns(
        x1 in proptest::collection::vec(0f64..1.0, 4),
        x2 in proptest::collection::vec(-3f64..3.0, 4),
        mask in proptest::collection::vec(any::<bool>(), 4),
        lambda in 0f64..50.0,
    ) {
        let d = vec![(0.0, 1.0); 4];
        let y = extrapolate_row(&x1, &x2, &mask, lambda, lambda, &d);
        for k in 0..4 {
            prop_assert!((0.0..1.0).contains(&y[k]));
            if !mask[k] {
                prop_assert_eq!(y[k].to_bits(), x1[k].to_bits());
            }
        }
    }
}

#[test]
fn featx_training_on_color_graph_selects_color_dimensions() {
    let hits = (0..3)
        .filter(|&seed| {
            let mut cfg = GenConfig::new(GenTask::ColorGraph, seed);
            cfg.counts = [120, 30, 30, 30, 30];
            let bundle = generate(&cfg).unwrap();
            let mut run = RunConfig::new(Method::Featx, seed);
            run.hidden_dim = 16;
            let state = train(&bundle, &run).unwrap().featx.unwrap();
            state.mask == [false, true, true, true]
        })
        .count();
    assert!(hits >= 2, "{hits} of 3 seeds");
}
