use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xtrap::bridge::{
    cross_pairs, kl_divergence, meta_examples, pretrain_bridge_generator, random_bridges, train_on_examples,
    vae_loss, BridgeConfig, BridgeError, BridgeExample, BridgeGenerator, DecodedPairs, LatentDist,
};
use xtrap::graph::{component_of_nodes, splice, Bridge, BridgeSet, Graph};
use xtrap::nn::Tape;
use xtrap::synth::{generate, GenConfig, GenTask};

fn path(n: usize) -> Graph {
    Graph::unit_features(n, (1..n).map(|v| (v - 1, v)).collect()).unwrap()
}

fn cycle(n: usize) -> Graph {
    Graph::unit_features(n, (0..n).map(|v| (v, (v + 1) % n)).collect()).unwrap()
}

fn generator(seed: u64) -> BridgeGenerator {
    BridgeGenerator::new(&BridgeConfig::new(seed)).unwrap()
}

fn small_motif_bundle(seed: u64) -> xtrap::dataset::DatasetBundle {
    let mut cfg = GenConfig::new(GenTask::MotifSize, seed);
    cfg.counts = [120, 10, 10, 10, 10];
    generate(&cfg).unwrap()
}

#[test]
fn single_component_has_constant_owner_and_positive_sigma() {
    let g = generator(0);
    let latent = g.encode(&[&cycle(5)]).unwrap();
    assert!(latent.component_of.iter().all(|&c| c == 0));
    assert!(latent.sigma.iter().all(|&s| s > 0.0));
    assert!(latent.cross_pairs().is_empty());
}

#[test]
fn encoding_is_permutation_equivariant_within_a_component() {
    let g = generator(1);
    let comp = Graph::unit_features(6, vec![(0, 1), (1, 2), (2, 3), (3, 0), (3, 4), (4, 5)]).unwrap();
    let perm = [4, 0, 5, 1, 3, 2];
    let base = g.encode(&[&comp]).unwrap();
    let moved = g.encode(&[&comp.permute(&perm).unwrap()]).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for k in 0..base.mu.ncols() {
            assert!((base.mu[[i, k]] - moved.mu[[p, k]]).abs() <= 1e-12);
            assert!((base.sigma[[i, k]] - moved.sigma[[p, k]]).abs() <= 1e-12);
        }
    }
}

#[test]
fn duplicated_component_gets_identical_latent_blocks() {
    let g = generator(2);
    let c = Graph::unit_features(5, vec![(0, 1), (1, 2), (2, 0), (2, 3), (3, 4)]).unwrap();
    let latent = g.encode(&[&c, &c]).unwrap();
    for v in 0..5 {
        assert_eq!(latent.mu.row(v), latent.mu.row(v + 5));
        assert_eq!(latent.sigma.row(v), latent.sigma.row(v + 5));
    }
    assert_eq!(latent.component_of, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
}

#[test]
fn decoded_probabilities_are_symmetric_and_open_interval() {
    let mut g = generator(3);
    // Give the final layer nonzero weights so the symmetry check has teeth.
    let id = g.params.get("bridge.decoder.out.weight").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    g.params.value_mut(id).mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let latent = g.encode(&[&path(3), &cycle(4)]).unwrap();
    let z = latent.sample(&mut rng);
    for (i, j) in latent.cross_pairs() {
        let (a, _) = g.decode_pair(&latent, &z, i, j).unwrap();
        let (b, _) = g.decode_pair(&latent, &z, j, i).unwrap();
        assert_eq!(a, b);
        let p = 1.0 / (1.0 + (-a).exp());
        assert!(p > 0.0 && p < 1.0);
    }
    assert!(matches!(g.decode_pair(&latent, &z, 0, 1), Err(BridgeError::SameComponentPair(0, 1))));
}

#[test]
fn zero_latents_with_fresh_decoder_give_one_half() {
    let g = generator(4);
    let z = Array2::zeros((4, g.config.latent_dim));
    let d = g.decode(&z, &[(0, 2), (1, 3)]);
    assert_eq!(d.logits, vec![0.0, 0.0]);
    assert_eq!(d.probs(), vec![0.5, 0.5]);
}

#[test]
fn bridge_count_distribution_has_full_support_and_sums_to_one() {
    let g = generator(5);
    let probs = g.predict_bridge_count(&[&path(4), &cycle(5), &path(2)]).unwrap();
    assert_eq!(probs.len(), 4);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(probs.iter().all(|&p| p > 0.0));
}

#[test]
fn sampled_bridges_cross_components() {
    let g = generator(6);
    let comps = [&path(3), &cycle(4)];
    let latent = g.encode(&comps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let b = g.sample_bridges(&comps, &latent, 1, false, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        let only = b.iter().next().unwrap();
        assert_ne!(only.comp_u, only.comp_v);
        assert_ne!(latent.component_of[only.u], latent.component_of[only.v]);
    }
}

#[test]
fn exhausting_all_cross_pairs_selects_every_pair() {
    let g = generator(7);
    let comps = [&path(2), &path(3)];
    let latent = g.encode(&comps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let all = latent.cross_pairs();
    let b = g.sample_bridges(&comps, &latent, all.len(), false, &mut rng).unwrap();
    for (i, j) in all {
        assert!(b.contains_pair(i, j));
    }
    let err = g.sample_bridges(&comps, &latent, 7, false, &mut rng).unwrap_err();
    assert!(matches!(err, BridgeError::InfeasibleBridgeCount { requested: 7, available: 6 }));
}

#[test]
fn repaired_bridges_connect_three_components() {
    let g = generator(8);
    let comps = [&path(3), &cycle(4), &path(2)];
    let latent = g.encode(&comps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let b = g.sample_bridges(&comps, &latent, 2, true, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert!(splice(&comps, &b).unwrap().is_connected());
    }
}

#[test]
fn generated_splices_are_valid_connected_graphs() {
    let g = generator(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 1..6 {
        let comps = [&path(n), &cycle(5), &path(2)];
        let (spliced, bridges) = g.splice_generated(&comps, &mut rng).unwrap();
        assert_eq!(spliced.num_nodes(), n + 7);
        assert_eq!(spliced.num_edges(), (n - 1) + 5 + 1 + bridges.len());
        assert!(spliced.is_connected());
    }
}

#[test]
fn kl_vanishes_at_prior_and_is_positive_elsewhere() {
    let mu = Array2::zeros((4, 3));
    let sigma = Array2::ones((4, 3));
    assert_eq!(kl_divergence(&mu, &sigma), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let m = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-3.0..3.0));
        let s = Array2::from_shape_simple_fn((4, 3), || rng.random_range(0.01..4.0));
        assert!(kl_divergence(&m, &s) > 0.0);
    }
}

/// Scalar recomputation: mean BCE over the cross pairs plus β times the
/// per-node-averaged Gaussian KL.
fn scalar_objective(pairs: &[(usize, usize)], logits: &[f64], truth: &[(usize, usize)], mu: &Array2<f64>, sigma: &Array2<f64>, beta: f64) -> f64 {
    let mut bce = 0.0;
    for (&(i, j), &l) in pairs.iter().zip(logits) {
        let p = 1.0 / (1.0 + (-l).exp());
        let t = truth.contains(&(i, j));
        bce -= if t { p.ln() } else { (1.0 - p).ln() };
    }
    bce /= pairs.len() as f64;
    let mut kl = 0.0;
    for (m, s) in mu.iter().zip(sigma.iter()) {
        kl += (s * s + m * m - 1.0 - (s * s).ln()) / 2.0;
    }
    bce + beta * kl / mu.nrows() as f64
}

#[test]
fn objective_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let component_of = vec![0, 0, 1, 1];
        let pairs = cross_pairs(&component_of);
        assert_eq!(pairs, vec![(0, 2), (0, 3), (1, 2), (1, 3)]);
        let latent = LatentDist {
            mu: Array2::from_shape_simple_fn((4, 2), || rng.random_range(-1.0..1.0)),
            sigma: Array2::from_shape_simple_fn((4, 2), || rng.random_range(0.2..2.0)),
            component_of,
        };
        let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let decoded = DecodedPairs { pairs: pairs.clone(), logits: logits.clone(), attr_logits: None };
        let truth = BridgeSet::new(vec![Bridge { u: 1, v: 2, comp_u: 0, comp_v: 1, attr: None }]).unwrap();
        let beta = rng.random_range(0.0..2.0);
        let got = vae_loss(&latent, &truth, &decoded, 1.0, beta);
        let want = scalar_objective(&pairs, &logits, &[(1, 2)], &latent.mu, &latent.sigma, beta);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn perfect_reconstruction_drives_bridge_term_to_zero() {
    let latent = LatentDist {
        mu: Array2::zeros((4, 2)),
        sigma: Array2::ones((4, 2)),
        component_of: vec![0, 0, 1, 1],
    };
    let pairs = latent.cross_pairs();
    let truth = BridgeSet::new(vec![Bridge { u: 0, v: 3, comp_u: 0, comp_v: 1, attr: None }]).unwrap();
    let logits = pairs.iter().map(|&(i, j)| if (i, j) == (0, 3) { 40.0 } else { -40.0 }).collect();
    let d = DecodedPairs { pairs, logits, attr_logits: None };
    assert!(vae_loss(&latent, &truth, &d, 1.0, 1.0) < 1e-15);
}

#[test]
fn random_bridges_unique_pair_and_infeasible_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = Graph::unit_features(1, vec![]).unwrap();
    let b = random_bridges(&[&a, &a], 1, 0, &mut rng).unwrap();
    assert!(b.contains_pair(0, 1));
    let err = random_bridges(&[&path(2), &path(2)], 5, 0, &mut rng).unwrap_err();
    assert!(matches!(err, BridgeError::InfeasibleBridgeCount { requested: 5, available: 4 }));
}

#[test]
fn random_bridges_are_uniform_over_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let comps = [&path(2), &path(2)];
    let draws = 10_000;
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut attr_counts = [0usize; 3];
    for _ in 0..draws {
        let b = random_bridges(&comps, 1, 3, &mut rng).unwrap();
        let only = b.iter().next().unwrap();
        *counts.entry((only.u.min(only.v), only.u.max(only.v))).or_default() += 1;
        let a = only.attr.as_ref().unwrap();
        attr_counts[a.iter().position(|&x| x == 1.0).unwrap()] += 1;
    }
    assert_eq!(counts.len(), 4);
    let expected = draws as f64 / 4.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of chi-square with 3 degrees of freedom.
    assert!(chi2 < 11.345, "chi2 = {chi2}");
    let expected = draws as f64 / 3.0;
    let chi2: f64 = attr_counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 9.210, "attribute chi2 = {chi2}");
}

#[test]
fn meta_examples_pair_base_and_motif_with_the_attachment_edge() {
    let bundle = small_motif_bundle(14);
    let examples = meta_examples(&bundle);
    assert_eq!(examples.len(), 120);
    for e in &examples {
        assert_eq!(e.components.len(), 2);
        assert_eq!(e.bridges.len(), 1);
        let motif_sizes: Vec<usize> = e.components.iter().map(Graph::num_nodes).collect();
        assert!(motif_sizes.contains(&5), "{motif_sizes:?}");
        let refs: Vec<&Graph> = e.components.iter().collect();
        let owner = component_of_nodes(&refs);
        let b = e.bridges.iter().next().unwrap();
        assert_ne!(owner[b.u], owner[b.v]);
    }
}

#[test]
fn pretraining_lowers_loss_and_predicts_single_attachment() {
    let bundle = small_motif_bundle(15);
    let run = pretrain_bridge_generator(&bundle, None, &BridgeConfig::new(15)).unwrap();
    assert_eq!(run.epoch_losses.len(), 30);
    assert!(run.epoch_losses.last().unwrap() < &run.epoch_losses[0], "{:?}", run.epoch_losses);
    let held_out = meta_examples(&small_motif_bundle(16));
    let ones = held_out
        .iter()
        .filter(|e| {
            let refs: Vec<&Graph> = e.components.iter().collect();
            let p = run.generator.predict_bridge_count(&refs).unwrap();
            let mode = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            mode == 0
        })
        .count();
    assert!(ones as f64 >= 0.9 * held_out.len() as f64, "{ones} of {}", held_out.len());
}

#[test]
fn missing_meta_and_extractor_is_reported() {
    let mut bundle = small_motif_bundle(17);
    for s in &mut bundle.samples {
        s.meta = None;
    }
    let err = pretrain_bridge_generator(&bundle, None, &BridgeConfig::new(17)).err().unwrap();
    assert!(matches!(err, BridgeError::NoPartitionAvailable));
}

fn attributed_example() -> BridgeExample {
    let bridges = BridgeSet::new(vec![
        Bridge { u: 0, v: 4, comp_u: 0, comp_v: 1, attr: Some(vec![0.0, 1.0]) },
        Bridge { u: 2, v: 3, comp_u: 0, comp_v: 1, attr: Some(vec![1.0, 0.0]) },
    ])
    .unwrap();
    BridgeExample { components: vec![path(3), cycle(4)], bridges }
}

fn attribute_head_gradient(alpha: f64) -> f64 {
    let mut cfg = BridgeConfig::new(18);
    cfg.attr_classes = 2;
    cfg.alpha = alpha;
    let mut g = BridgeGenerator::new(&cfg).unwrap();
    let example = attributed_example();
    let mut tape = Tape::new();
    let mut stats = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let loss = g.loss_on_tape(&g.params, &mut tape, &[&example], &mut stats, &mut rng);
    tape.backward(loss, &mut g.params).unwrap();
    ["bridge.decoder.attr.weight", "bridge.decoder.attr.bias"]
        .iter()
        .map(|n| g.params.grad(g.params.get(n).unwrap()).iter().map(|x| x.abs()).sum::<f64>())
        .sum()
}

#[test]
fn zero_alpha_silences_the_attribute_head() {
    assert_eq!(attribute_head_gradient(0.0), 0.0);
    assert!(attribute_head_gradient(1.0) > 0.0);
}

#[test]
fn explicit_examples_train_and_checkpoint_round_trips() {
    let mut cfg = BridgeConfig::new(19);
    cfg.attr_classes = 2;
    cfg.epochs = 5;
    let examples = vec![attributed_example(); 4];
    let run = train_on_examples(BridgeGenerator::new(&cfg).unwrap(), &examples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bridge.bin");
    run.generator.save(&file).unwrap();
    let back = BridgeGenerator::load(&file).unwrap();
    assert_eq!(back.config, run.generator.config);
    let comps = [&path(3), &cycle(4)];
    assert_eq!(back.encode(&comps).unwrap(), run.generator.encode(&comps).unwrap());
}
