use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xtrap::bridge::{pretrain_bridge_generator, BridgeConfig, BridgeGenerator};
use xtrap::dataset::{one_hot, DatasetBundle, ShiftDomain, Split};
use xtrap::extract::{pretrain_extractor, Extractor, ExtractorConfig, ExtractorKind};
use xtrap::splice::{
    assign_environments, assign_label, make_option1, make_option2, make_option3, run_gsplice, vrex_objective,
    BridgeMode, SpliceConfig, SpliceError, SpliceModels, SpliceOptions,
};
use xtrap::synth::{generate, motif_oracle_label, GenConfig, GenTask};

struct Fixture {
    bundle: DatasetBundle,
    causal: Extractor,
    env: Extractor,
    bridge: BridgeGenerator,
}

impl Fixture {
    fn models(&self) -> SpliceModels<'_> {
        SpliceModels {
            causal: Some(&self.causal),
            env: Some(&self.env),
            bridge: Some(&self.bridge),
        }
    }
}

/// A small motif-base bundle with both extractors and the bridge
/// generator, trained once and shared by the tests below.
fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = GenConfig::new(GenTask::MotifBase, 21);
        cfg.counts = [160, 10, 10, 10, 10];
        let bundle = generate(&cfg).unwrap();
        let causal = pretrain_extractor(&bundle, &ExtractorConfig::new(ExtractorKind::Causal, 21)).unwrap().extractor;
        let env = pretrain_extractor(&bundle, &ExtractorConfig::new(ExtractorKind::Env, 21)).unwrap().extractor;
        let bridge = pretrain_bridge_generator(&bundle, Some(&causal), &BridgeConfig::new(21)).unwrap().generator;
        Fixture { bundle, causal, env, bridge }
    })
}

fn train_size(bundle: &DatasetBundle) -> usize {
    bundle.split(Split::Train).count()
}

#[test]
fn label_of_two_causal_components_is_their_mean() {
    let y = assign_label(&[one_hot(0, 3), one_hot(1, 3)], &[true, true]).unwrap();
    assert_eq!(y, vec![0.5, 0.5, 0.0]);
    let y = assign_label(&[one_hot(2, 3), one_hot(2, 3)], &[true, true]).unwrap();
    assert_eq!(y, one_hot(2, 3));
}

#[test]
fn single_causal_component_keeps_its_label() {
    let y = vec![0.2, 0.3, 0.5];
    assert_eq!(assign_label(&[y.clone()], &[true]).unwrap(), y);
}

#[test]
fn environmental_components_do_not_vote() {
    let labels = [one_hot(1, 3), one_hot(0, 3), one_hot(2, 3), one_hot(0, 3)];
    let y = assign_label(&labels, &[true, false, false, false]).unwrap();
    assert_eq!(y, one_hot(1, 3));
    assert!(matches!(assign_label(&labels, &[false; 4]), Err(SpliceError::NoCausalComponent)));
}

#[test]
fn size_domain_gives_each_option_its_environment() {
    let envs = assign_environments(&[1, 3, 3, 1], ShiftDomain::Size, 7);
    assert_eq!(envs, vec![7, 8, 8, 7]);
}

#[test]
fn base_domain_groups_options_two_and_three() {
    let envs = assign_environments(&[1, 2, 3, 2, 1], ShiftDomain::Base, 4);
    assert_eq!(envs, vec![4, 5, 5, 5, 4]);
    let envs = assign_environments(&[3, 2], ShiftDomain::Base, 4);
    assert_eq!(envs, vec![4, 4]);
}

#[test]
fn no_augmented_samples_means_no_environments() {
    assert!(assign_environments(&[], ShiftDomain::Size, 3).is_empty());
}

#[test]
fn variance_penalty_hand_cases() {
    assert_eq!(vrex_objective(&[0.7, 0.7, 0.7], &[3, 5, 2], 10.0), 0.7);
    let erm = vrex_objective(&[0.5, 1.5], &[1, 3], 0.0);
    assert!((erm - 1.25).abs() < 1e-15);
    assert!((vrex_objective(&[0.0, 2.0], &[4, 4], 1.0) - 2.0).abs() < 1e-15);
}

#[test]
fn option_strings_parse_as_bits_or_lists() {
    let o = SpliceOptions::parse("101").unwrap();
    assert_eq!(o.ids(), vec![1, 3]);
    assert_eq!(SpliceOptions::parse("2,3").unwrap().ids(), vec![2, 3]);
    assert!(SpliceOptions::parse("4").is_err());
    let none = SpliceConfig::new(SpliceOptions::parse("000").unwrap());
    assert!(none.validate().is_err());
    let mut one = SpliceConfig::new(SpliceOptions::parse("3").unwrap());
    one.f = 1;
    assert!(one.validate().is_err());
}

#[test]
fn option1_shrinks_the_source_and_keeps_its_label() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let s = make_option1(&fx.bundle, &fx.causal, &mut rng).unwrap();
        let meta = s.meta.as_ref().unwrap();
        assert_eq!(meta.option, Some(1));
        let src = &fx.bundle.samples[meta.sources[0]];
        assert!(s.graph().unwrap().num_nodes() < src.graph().unwrap().num_nodes());
        assert_eq!(s.label, src.label);
    }
}

#[test]
fn option2_sizes_add_up_and_follow_the_causal_source() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for f in [2, 3] {
        for _ in 0..10 {
            let s = make_option2(&fx.bundle, fx.models(), BridgeMode::Vae, f, &mut rng).unwrap();
            let meta = s.meta.as_ref().unwrap();
            assert_eq!(meta.sources.len(), f + 1);
            let size_of = |ex: &Extractor, i: usize| {
                let src = &fx.bundle.samples[i];
                ex.extract(src.graph().unwrap(), Some((src.hard_label(), src.env))).unwrap().num_nodes()
            };
            let expected = size_of(&fx.causal, meta.sources[0])
                + meta.sources[1..].iter().map(|&i| size_of(&fx.env, i)).sum::<usize>();
            let g = s.graph().unwrap();
            assert_eq!(g.num_nodes(), expected);
            assert!(g.is_connected());
            assert_eq!(s.label, fx.bundle.samples[meta.sources[0]].label);
        }
    }
}

#[test]
fn option2_carries_bases_from_each_environmental_source() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let s = make_option2(&fx.bundle, fx.models(), BridgeMode::Vae, 2, &mut rng).unwrap();
        let meta = s.meta.as_ref().unwrap();
        let expected: Vec<usize> = meta
            .sources
            .iter()
            .flat_map(|&i| fx.bundle.samples[i].meta.as_ref().unwrap().base_kinds.clone())
            .collect();
        assert_eq!(meta.base_kinds, expected);
    }
}

#[test]
fn option3_sizes_add_up_and_labels_average() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [BridgeMode::Vae, BridgeMode::Random] {
        for _ in 0..20 {
            let s = make_option3(&fx.bundle, Some(&fx.bridge), mode, 2, &mut rng).unwrap();
            let meta = s.meta.as_ref().unwrap();
            let srcs: Vec<_> = meta.sources.iter().map(|&i| &fx.bundle.samples[i]).collect();
            let total: usize = srcs.iter().map(|x| x.graph().unwrap().num_nodes()).sum();
            assert_eq!(s.graph().unwrap().num_nodes(), total);
            let mean: Vec<f64> = (0..3).map(|c| (srcs[0].label[c] + srcs[1].label[c]) / 2.0).collect();
            assert_eq!(s.label, mean);
            let oracle = motif_oracle_label(s.graph().unwrap(), meta, 3).unwrap();
            assert_eq!(oracle, s.label);
        }
    }
}

#[test]
fn run_appends_the_quota_in_new_environments() {
    let fx = fixture();
    let n = train_size(&fx.bundle);
    let cfg = SpliceConfig::new(SpliceOptions::parse("111").unwrap());
    let out = run_gsplice(&fx.bundle, &cfg, fx.models(), 5).unwrap();
    assert_eq!(out.samples.len(), fx.bundle.samples.len() + n);
    assert_eq!(&out.samples[..fx.bundle.samples.len()], &fx.bundle.samples[..]);
    let added = &out.samples[fx.bundle.samples.len()..];
    let per_option = |o: u8| added.iter().filter(|s| s.option() == Some(o)).count();
    assert_eq!(per_option(1) + per_option(2) + per_option(3), n);
    assert!(per_option(1).abs_diff(per_option(3)) <= 1);
    let original_envs = fx.bundle.train_envs();
    let new_envs: std::collections::BTreeSet<usize> = added.iter().map(|s| s.env).collect();
    assert_eq!(new_envs.len(), 2);
    assert!(new_envs.iter().all(|e| !original_envs.contains(e)));
    assert!(added.iter().all(|s| s.split == Split::Train));
    // Extractions may fall apart; spliced samples are repaired to one piece.
    assert!(added.iter().filter(|s| s.option() != Some(1)).all(|s| s.graph().unwrap().is_connected()));
}

#[test]
fn run_with_fractional_pct_rounds_up() {
    let fx = fixture();
    let n = train_size(&fx.bundle);
    let mut cfg = SpliceConfig::new(SpliceOptions::parse("3").unwrap());
    cfg.pct = 0.6;
    let out = run_gsplice(&fx.bundle, &cfg, fx.models(), 6).unwrap();
    let added = &out.samples[fx.bundle.samples.len()..];
    assert_eq!(added.len(), (0.6 * n as f64).ceil() as usize);
    assert!(added.iter().all(|s| s.option() == Some(3)));
}

#[test]
fn run_is_deterministic_per_seed() {
    let fx = fixture();
    let cfg = SpliceConfig::new(SpliceOptions::parse("101").unwrap());
    let a = run_gsplice(&fx.bundle, &cfg, fx.models(), 7).unwrap();
    let b = run_gsplice(&fx.bundle, &cfg, fx.models(), 7).unwrap();
    assert_eq!(a, b);
    let c = run_gsplice(&fx.bundle, &cfg, fx.models(), 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn missing_models_are_reported() {
    let fx = fixture();
    let cfg = SpliceConfig::new(SpliceOptions::parse("010").unwrap());
    let only_causal = SpliceModels {
        causal: Some(&fx.causal),
        ..SpliceModels::default()
    };
    let err = run_gsplice(&fx.bundle, &cfg, only_causal, 0).unwrap_err();
    assert!(matches!(err, SpliceError::MissingCheckpoint(_)), "{err}");
    let cfg = SpliceConfig::new(SpliceOptions::parse("001").unwrap());
    let err = run_gsplice(&fx.bundle, &cfg, SpliceModels::default(), 0).unwrap_err();
    assert!(matches!(err, SpliceError::MissingCheckpoint(_)), "{err}");
    let mut random = cfg.clone();
    random.bridge_mode = BridgeMode::Random;
    assert!(run_gsplice(&fx.bundle, &random, SpliceModels::default(), 0).is_ok());
}
