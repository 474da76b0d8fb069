use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xtrap::dataset::{DatasetBundle, Split};
use xtrap::extract::{
    node_iou, node_keep_probs, pretrain_extractor, sample_subgraph, topk_mask, valid_pairs, weighted_similarity,
    ExtractError, Extractor, ExtractorConfig, ExtractorKind, SampleMode, Side,
};
use xtrap::graph::Graph;
use xtrap::nn::scalar_sigmoid;
use xtrap::synth::{generate, GenConfig, GenTask};

fn motif_base(seed: u64) -> DatasetBundle {
    let mut cfg = GenConfig::new(GenTask::MotifBase, seed);
    cfg.counts = [160, 10, 40, 10, 10];
    generate(&cfg).unwrap()
}

fn trained(bundle: &DatasetBundle, kind: ExtractorKind, seed: u64) -> Extractor {
    pretrain_extractor(bundle, &ExtractorConfig::new(kind, seed)).unwrap().extractor
}

fn base_nodes(g: &Graph, motif: &[usize]) -> Vec<usize> {
    (0..g.num_nodes()).filter(|v| !motif.contains(v)).collect()
}

#[test]
fn similarity_of_a_graph_with_itself_has_unit_diagonal() {
    let z = array![[1.0, 2.0, 0.5], [-0.3, 0.1, 4.0], [2.0, 2.0, 2.0]];
    let s = weighted_similarity(&z, &z, 1.0);
    for i in 0..3 {
        assert!((s[[i, i]] - 1.0).abs() < 1e-6);
    }
    assert!(s.iter().all(|&x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&x)));
    let scaled = weighted_similarity(&z, &z, -2.5);
    assert!(scaled.iter().all(|&x| x.abs() <= 2.5 + 1e-12));
}

#[test]
fn zero_weight_gives_zero_similarity_and_half_probabilities() {
    let z1 = array![[1.0, 0.0], [0.3, 0.7]];
    let z2 = array![[0.2, 0.9], [1.0, 1.0], [-1.0, 0.5]];
    let s = weighted_similarity(&z1, &z2, 0.0);
    assert!(s.iter().all(|&x| x == 0.0));
    assert_eq!(node_keep_probs(&s, Side::First), vec![0.5; 2]);
    assert_eq!(node_keep_probs(&s, Side::Second), vec![0.5; 3]);
}

#[test]
fn similarity_matches_independent_cosine() {
    let z1 = array![[1.0, 2.0], [0.0, -1.0]];
    let z2 = array![[3.0, 4.0], [1.0, 1.0], [-2.0, 0.5]];
    let s = weighted_similarity(&z1, &z2, 0.7);
    for i in 0..2 {
        for j in 0..3 {
            let (a, b) = (z1.row(i), z2.row(j));
            let cos = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
            assert!((s[[i, j]] - 0.7 * cos).abs() < 1e-6);
        }
    }
}

#[test]
fn keep_probabilities_of_hand_matrix() {
    let s = array![[2.0, -1.0], [0.0, 3.0]];
    let first = node_keep_probs(&s, Side::First);
    assert_eq!(first, vec![scalar_sigmoid(2.0), scalar_sigmoid(3.0)]);
    let second = node_keep_probs(&s, Side::Second);
    assert_eq!(second, vec![scalar_sigmoid(2.0), scalar_sigmoid(3.0)]);
}

#[test]
fn saturated_similarity_keeps_every_node() {
    let s = Array2::from_elem((4, 4), 60.0);
    assert!(node_keep_probs(&s, Side::First).iter().all(|&p| p > 1.0 - 1e-12));
}

#[test]
fn topk_and_bernoulli_edge_cases() {
    let g = Graph::unit_features(4, vec![(0, 1), (1, 2), (2, 3)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let whole = sample_subgraph(&g, &[1.0; 4], SampleMode::Bernoulli, &mut rng).unwrap();
    assert_eq!(whole, g);
    let whole = sample_subgraph(&g, &[0.1, 0.4, 0.2, 0.3], SampleMode::TopK(1.0), &mut rng).unwrap();
    assert_eq!(whole, g);
    assert_eq!(topk_mask(&[0.1, 0.4, 0.2, 0.3], 0.5), vec![false, true, false, true]);
    assert_eq!(topk_mask(&[0.5; 3], 0.3), vec![true, false, false]);
    // All-zero Bernoulli draws fall back to a nonempty top-k subgraph.
    let fallback = sample_subgraph(&g, &[0.0; 4], SampleMode::Bernoulli, &mut rng).unwrap();
    assert_eq!(fallback.num_nodes(), 2);
}

#[test]
fn oracle_probabilities_recover_the_motif() {
    let bundle = motif_base(1);
    for (_, s) in bundle.split(Split::Train).take(30) {
        let g = s.graph().unwrap();
        let motif = &s.meta.as_ref().unwrap().motif_nodes;
        let probs: Vec<f64> = (0..g.num_nodes()).map(|v| if motif.contains(&v) { 0.9 } else { 0.1 }).collect();
        let rho = motif.len() as f64 / g.num_nodes() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = sample_subgraph(g, &probs, SampleMode::TopK(rho), &mut rng).unwrap();
        let keep = topk_mask(&probs, rho);
        assert_eq!(sub.num_nodes(), motif.len());
        assert_eq!(node_iou(&keep, motif), 1.0);
    }
}

#[test]
fn single_environment_has_no_causal_pairs() {
    let mut bundle = motif_base(2);
    for s in &mut bundle.samples {
        s.env = 0;
    }
    assert!(valid_pairs(&bundle, ExtractorKind::Causal).is_empty());
    let err = pretrain_extractor(&bundle, &ExtractorConfig::new(ExtractorKind::Causal, 2)).err().unwrap();
    assert!(matches!(err, ExtractError::NoValidPairs(_)), "{err}");
}

#[test]
fn valid_pairs_respect_label_and_environment_rules() {
    let bundle = motif_base(3);
    for (kind, same_label, same_env) in [(ExtractorKind::Causal, true, false), (ExtractorKind::Env, false, true)] {
        let pairs = valid_pairs(&bundle, kind);
        assert!(!pairs.is_empty());
        for (i, j) in pairs {
            let (a, b) = (&bundle.samples[i], &bundle.samples[j]);
            assert_eq!(a.hard_label() == b.hard_label(), same_label);
            assert_eq!(a.env == b.env, same_env);
        }
    }
}

/// Mean IoU of held-out extractions with a per-graph truth set.
fn mean_iou(bundle: &DatasetBundle, ex: &Extractor, truth: impl Fn(&Graph, &[usize]) -> Vec<usize>) -> f64 {
    let held_out: Vec<_> = bundle.split(Split::IdTest).collect();
    let total: f64 = held_out
        .iter()
        .map(|(_, s)| {
            let g = s.graph().unwrap();
            let motif = &s.meta.as_ref().unwrap().motif_nodes;
            let keep = ex.keep_mask(g, Some((s.hard_label(), s.env)));
            node_iou(&keep, &truth(g, motif))
        })
        .sum();
    total / held_out.len() as f64
}

#[test]
fn causal_extractor_finds_motifs_on_motif_base() {
    let bundle = motif_base(4);
    let ex = trained(&bundle, ExtractorKind::Causal, 4);
    let iou = mean_iou(&bundle, &ex, |_, m| m.to_vec());
    assert!(iou >= 0.8, "causal IoU {iou:.3}");

    let held_out: Vec<_> = bundle.split(Split::IdTest).collect();
    let correct = held_out
        .iter()
        .filter(|(_, s)| ex.predict_extracted(s.graph().unwrap(), None).unwrap() == s.hard_label())
        .count();
    let acc = correct as f64 / held_out.len() as f64;
    assert!(acc >= 0.9, "label accuracy from extraction {acc:.3}");
}

#[test]
fn environmental_extractor_finds_bases_on_motif_base() {
    let bundle = motif_base(5);
    let ex = trained(&bundle, ExtractorKind::Env, 5);
    let iou = mean_iou(&bundle, &ex, base_nodes);
    assert!(iou >= 0.8, "environmental IoU {iou:.3}");
}

#[test]
fn extraction_is_deterministic_and_checkpoints_round_trip() {
    let bundle = motif_base(6);
    let mut cfg = ExtractorConfig::new(ExtractorKind::Causal, 6);
    cfg.epochs = 3;
    let run = pretrain_extractor(&bundle, &cfg).unwrap();
    assert_eq!(run.epoch_losses.len(), 3);
    let again = pretrain_extractor(&bundle, &cfg).unwrap();
    assert_eq!(run.epoch_losses, again.epoch_losses);

    let s = &bundle.samples[0];
    let g = s.graph().unwrap();
    let ctx = Some((s.hard_label(), s.env));
    assert_eq!(run.extractor.extract(g, ctx).unwrap(), run.extractor.extract(g, ctx).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("causal.bin");
    run.extractor.save(&file).unwrap();
    let back = Extractor::load(&file).unwrap();
    assert_eq!(back.keep_probs(g, ctx), run.extractor.keep_probs(g, ctx));
    let sub = back.extract(g, ctx).unwrap();
    assert_eq!(sub.num_nodes(), (0.35 * g.num_nodes() as f64).ceil() as usize);
}
