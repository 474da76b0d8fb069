//! Oracle suites: splice algebra, gradient checks, modulo closure,
//! size extrapolation and label assignment, feature coverage and run
//! determinism.

use std::rc::Rc;

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{train, Method, RunConfig};
use super::HarnessError;
use crate::bridge::{kl_divergence, pretrain_bridge_generator, random_bridges, BridgeConfig, BridgeExample, BridgeGenerator};
use crate::dataset::{to_jsonl, DatasetBundle, Split};
use crate::extract::{pretrain_extractor, Extractor, ExtractorConfig, ExtractorKind};
use crate::featx::{extrapolate_row, generalized_modulo, sample_lambda};
use crate::graph::{induced_subgraph, splice, BridgeSet, Graph};
use crate::nn::{
    check_gradients, AdamConfig, BatchNorm, Classifier, GnnConfig, GnnKind, GraphBatch, Mode, ParamStore, Pooling,
    Sparse,
};
use crate::splice::{run_gsplice, vrex_objective, SpliceConfig, SpliceModels, SpliceOptions};
use crate::synth::{generate, motif_oracle_label, GenConfig, GenTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    SpliceAlgebra,
    Gradcheck,
    Modulo,
    Thm31,
    Thm32,
    Thm51,
    Determinism,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::SpliceAlgebra,
        Suite::Gradcheck,
        Suite::Modulo,
        Suite::Thm31,
        Suite::Thm32,
        Suite::Thm51,
        Suite::Determinism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::SpliceAlgebra => "splice-algebra",
            Suite::Gradcheck => "gradcheck",
            Suite::Modulo => "modulo",
            Suite::Thm31 => "thm31",
            Suite::Thm32 => "thm32",
            Suite::Thm51 => "thm51",
            Suite::Determinism => "determinism",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown suite {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured value or counterexample.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub splice_trials: usize,
    pub modulo_trials: usize,
    pub coverage_draws: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            splice_trials: 10_000,
            modulo_trials: 1_000_000,
            coverage_draws: 10_000,
        }
    }
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn failed(name: &str, err: impl std::fmt::Display) -> Check {
    check(name, false, format!("error: {err}"))
}

/// Runs one suite; failures and internal errors are reported, not raised.
pub fn verify(suite: Suite, opts: &VerifyOptions) -> SuiteReport {
    let checks = match suite {
        Suite::SpliceAlgebra => splice_algebra(opts),
        Suite::Gradcheck => gradcheck(opts),
        Suite::Modulo => modulo(opts),
        Suite::Thm31 => thm31(opts),
        Suite::Thm32 => thm32(opts),
        Suite::Thm51 => thm51(opts),
        Suite::Determinism => determinism(opts),
    };
    SuiteReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn random_graph<R: Rng>(rng: &mut R, n: usize, p: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(0.3) {
                edges.push((u, v));
            }
        }
    }
    let x = Array2::from_shape_simple_fn((n, p), || rng.random_range(-1.0..1.0));
    Graph::new(n, edges, x, None).expect("valid random graph")
}

/// Size additivity, edge accounting and feature concatenation over random
/// splices; the error describes the first counterexample.
pub fn splice_additivity(trials: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let k = rng.random_range(1..=4);
        let comps: Vec<Graph> = (0..k)
            .map(|_| {
                let n = rng.random_range(1..=7);
                random_graph(&mut rng, n, 2)
            })
            .collect();
        let refs: Vec<&Graph> = comps.iter().collect();
        let bridges = if k == 1 {
            BridgeSet::empty()
        } else {
            let avail: usize = {
                let sizes: Vec<usize> = comps.iter().map(Graph::num_nodes).collect();
                let total: usize = sizes.iter().sum();
                sizes.iter().map(|s| s * (total - s)).sum::<usize>() / 2
            };
            let b = rng.random_range(1..=avail.min(5));
            random_bridges(&refs, b, 0, &mut rng).map_err(|e| format!("trial {trial}: {e}"))?
        };
        let g = splice(&refs, &bridges).map_err(|e| format!("trial {trial}: {e}"))?;
        let nodes: usize = comps.iter().map(Graph::num_nodes).sum();
        let edges: usize = comps.iter().map(Graph::num_edges).sum::<usize>() + bridges.len();
        if g.num_nodes() != nodes || g.num_edges() != edges {
            return Err(format!(
                "trial {trial}: sizes {:?}, {} bridges gave {} nodes / {} edges",
                comps.iter().map(Graph::num_nodes).collect::<Vec<_>>(),
                bridges.len(),
                g.num_nodes(),
                g.num_edges()
            ));
        }
        let mut row = 0;
        for c in &comps {
            for r in 0..c.num_nodes() {
                if g.node_features().row(row) != c.node_features().row(r) {
                    return Err(format!("trial {trial}: feature row {row} not carried over"));
                }
                row += 1;
            }
        }
    }
    Ok(())
}

fn splice_algebra(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = vec![match splice_additivity(opts.splice_trials, opts.seed) {
        Ok(()) => check("size and edge additivity", true, format!("{} random splices", opts.splice_trials)),
        Err(e) => check("size and edge additivity", false, e),
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 1);
    let mut identity = Ok(());
    for trial in 0..200 {
        let n = rng.random_range(1..=9);
        let g = random_graph(&mut rng, n, 2);
        let same = splice(&[&g], &BridgeSet::empty()).map(|s| s == g).unwrap_or(false);
        let full = induced_subgraph(&g, &vec![true; g.num_nodes()]).map(|s| s == g).unwrap_or(false);
        if !(same && full) {
            identity = Err(format!("trial {trial}: single splice {same}, full induced {full}"));
            break;
        }
    }
    out.push(match identity {
        Ok(()) => check("identity cases", true, "200 graphs"),
        Err(e) => check("identity cases", false, e),
    });
    out
}

fn small_config(kind: GnnKind, pooling: Pooling) -> GnnConfig {
    GnnConfig {
        kind,
        num_layers: 2,
        hidden_dim: 5,
        input_dim: 3,
        num_classes: 3,
        pooling,
        dropout: 0.0,
    }
}

const GRAD_TOL: f64 = 1e-4;

fn grad_check_entry(name: &str, rel: f64) -> Check {
    check(name, rel <= GRAD_TOL, format!("max relative error {rel:.2e}"))
}

fn gradcheck(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let g = {
        let mut g = random_graph(&mut rng, 6, 3);
        if g.num_edges() == 0 {
            g = Graph::new(6, vec![(0, 1), (1, 2), (2, 5)], g.node_features().clone(), None).unwrap();
        }
        g
    };
    let batch = GraphBatch::new(&[&g]);

    // GIN classifier in training mode (batch statistics).
    {
        let mut store = ParamStore::new();
        let model = Classifier::new(&mut store, &small_config(GnnKind::Gin, Pooling::Mean), &mut rng).expect("model");
        let target = Rc::new(array![[0.2, 0.5, 0.3]]);
        let ids: Vec<_> = store.ids().collect();
        let r = check_gradients(&mut store, &ids, 1e-4, |t, s| {
            let x = t.constant(batch.x.clone());
            let mut stats = Vec::new();
            let mut mode = Mode::Train { dropout: None, stats: &mut stats };
            let logits = model.logits(t, s, &batch, x, &mut mode).expect("logits");
            let ce = t.softmax_ce(logits, target.clone());
            t.mean_all(ce)
        });
        out.push(grad_check_entry("gin classifier", r.max_rel_error));
    }
    // GCN node classifier.
    {
        let mut store = ParamStore::new();
        let model = Classifier::new(&mut store, &small_config(GnnKind::Gcn, Pooling::None), &mut rng).expect("model");
        let targets = Rc::new(array![[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]]);
        let pick = Rc::new(Sparse::new(2, 6, vec![(0, 1, 1.0), (1, 4, 1.0)]));
        let ids: Vec<_> = store.ids().collect();
        let r = check_gradients(&mut store, &ids, 1e-4, |t, s| {
            let x = t.constant(batch.x.clone());
            let logits = model.logits(t, s, &batch, x, &mut Mode::Eval).expect("logits");
            let chosen = t.spmm(pick.clone(), logits);
            let ce = t.softmax_ce(chosen, targets.clone());
            t.mean_all(ce)
        });
        out.push(grad_check_entry("gcn node classifier", r.max_rel_error));
    }
    // Batch normalization.
    {
        let mut store = ParamStore::new();
        let x = store.add("x", Array2::from_shape_simple_fn((5, 3), || rng.random_range(-2.0..2.0)));
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let w = Rc::new(Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0)));
        let ids: Vec<_> = store.ids().filter(|&id| !store.name(id).contains("running")).collect();
        let r = check_gradients(&mut store, &ids, 1e-5, |t, s| {
            let xv = t.param(s, x);
            let mut stats = Vec::new();
            let mut mode = Mode::Train { dropout: None, stats: &mut stats };
            let y = bn.forward(t, s, xv, &mut mode);
            let wv = t.constant((*w).clone());
            let prod = t.mul(y, wv);
            t.sum_all(prod)
        });
        out.push(grad_check_entry("batch norm", r.max_rel_error));
    }
    // Bridge generator objective (reparameterized Gaussian, BCE, KL, count CE).
    {
        let cfg = BridgeConfig {
            input_dim: 3,
            attr_classes: 2,
            hidden_dim: 4,
            num_layers: 2,
            latent_dim: 3,
            max_bridges: 3,
            ..BridgeConfig::new(opts.seed)
        };
        let mut gen = BridgeGenerator::new(&cfg).expect("generator");
        // Nonzero decoder output so every path carries gradient.
        for id in gen.params.ids().collect::<Vec<_>>() {
            if gen.params.name(id) == "bridge.decoder.out.weight" {
                gen.params.value_mut(id).mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
        }
        let a = random_graph(&mut rng, 3, 3);
        let b = random_graph(&mut rng, 2, 3);
        let example = BridgeExample {
            components: vec![a, b],
            bridges: BridgeSet::new(vec![crate::graph::Bridge {
                u: 1,
                v: 3,
                comp_u: 0,
                comp_v: 1,
                attr: Some(vec![0.0, 1.0]),
            }])
            .expect("bridge"),
        };
        let mut store = gen.params.clone();
        let ids: Vec<_> = store.ids().filter(|&id| !store.name(id).contains("running")).collect();
        let seed = opts.seed;
        let r = check_gradients(&mut store, &ids, 1e-5, |t, s| {
            let mut noise = ChaCha8Rng::seed_from_u64(seed);
            let mut stats = Vec::new();
            gen.loss_on_tape(s, t, &[&example], &mut stats, &mut noise)
        });
        out.push(grad_check_entry("bridge generator objective", r.max_rel_error));
    }
    // KL nonnegativity and zero at the prior.
    {
        let mut worst = f64::INFINITY;
        for _ in 0..1000 {
            let mu = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-2.0..2.0));
            let sigma = Array2::from_shape_simple_fn((3, 4), || rng.random_range(0.05..3.0));
            worst = worst.min(kl_divergence(&mu, &sigma));
        }
        let prior = kl_divergence(&Array2::zeros((3, 4)), &Array2::ones((3, 4)));
        out.push(check(
            "kl nonnegative, zero at prior",
            worst >= 0.0 && prior == 0.0,
            format!("min over 1000 draws {worst:.3e}, prior {prior}"),
        ));
    }
    // Variance penalty hand case.
    {
        let v = vrex_objective(&[0.0, 2.0], &[5, 5], 1.0);
        out.push(check("vrex hand case", (v - 2.0).abs() < 1e-12, format!("{{0, 2}}, gamma 1 -> {v}")));
    }
    // Adam against the scalar recursion.
    {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let grads = [0.5, -0.2, 0.05];
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut store = ParamStore::new();
        let p = store.add("w", array![[1.0]]);
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t as i32 + 1))) / ((v / (1.0 - b2.powi(t as i32 + 1))).sqrt() + eps);
            store.accumulate_grad(p, &array![[g]]);
            store.adam_step(&AdamConfig::new(lr));
        }
        let got = store.value(p)[[0, 0]];
        out.push(check("adam recursion", (got - w).abs() < 1e-14, format!("{got} vs {w}")));
    }
    // Permutation invariance of pooled predictions.
    {
        let mut worst: f64 = 0.0;
        for kind in [GnnKind::Gin, GnnKind::Gcn] {
            let mut store = ParamStore::new();
            let model = Classifier::new(&mut store, &small_config(kind, Pooling::Mean), &mut rng).expect("model");
            for _ in 0..20 {
                let g = random_graph(&mut rng, 9, 3);
                let mut perm: Vec<usize> = (0..9).collect();
                for i in (1..9).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let gp = g.permute(&perm).expect("permutation");
                let a = model.predict(&store, &GraphBatch::new(&[&g])).expect("predict");
                let b = model.predict(&store, &GraphBatch::new(&[&gp])).expect("predict");
                for (x, y) in a.iter().zip(b.iter()) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        out.push(check("permutation invariance", worst <= 1e-6, format!("max deviation {worst:.2e}")));
    }
    out
}

fn modulo(opts: &VerifyOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut violation = None;
    for trial in 0..opts.modulo_trials {
        let lo = rng.random_range(-5.0..5.0);
        let hi = lo + rng.random_range(1e-3..10.0);
        let x = rng.random_range(-1e4..1e4);
        let y = generalized_modulo(&[x], &[(lo, hi)])[0];
        let k = ((y - x) / (hi - lo)).round();
        let aligned = ((y - x) - k * (hi - lo)).abs() <= 1e-6 * (1.0 + x.abs());
        if !(lo <= y && y < hi && aligned) {
            violation = Some(format!("trial {trial}: {x} into [{lo}, {hi}) gave {y}"));
            break;
        }
    }
    let hand = [
        (generalized_modulo(&[1.3], &[(0.0, 1.0)])[0], 0.3),
        (generalized_modulo(&[0.5], &[(0.0, 1.0)])[0], 0.5),
        (generalized_modulo(&[-1.5], &[(-1.0, 1.0)])[0], 0.5),
        (extrapolate_row(&[0.8], &[0.2], &[true], 1.0, 1.0, &[(0.0, 1.0)])[0], 0.4),
    ];
    let hand_ok = hand.iter().all(|(g, e)| (g - e).abs() < 1e-9);
    vec![
        check(
            "domain closure",
            violation.is_none(),
            violation.unwrap_or_else(|| format!("{} random calls", opts.modulo_trials)),
        ),
        check("hand cases", hand_ok, format!("{hand:?}")),
    ]
}

/// Extractors and bridge generator trained on a fresh bundle.
struct StructureFixture {
    bundle: DatasetBundle,
    causal: Extractor,
    env: Option<Extractor>,
    bridge: BridgeGenerator,
}

impl StructureFixture {
    fn build(task: GenTask, seed: u64, with_env: bool) -> Result<Self, String> {
        let bundle = generate(&GenConfig::new(task, seed)).map_err(|e| e.to_string())?;
        let causal = pretrain_extractor(&bundle, &ExtractorConfig::new(ExtractorKind::Causal, seed))
            .map_err(|e| e.to_string())?
            .extractor;
        let env = if with_env {
            Some(
                pretrain_extractor(&bundle, &ExtractorConfig::new(ExtractorKind::Env, seed))
                    .map_err(|e| e.to_string())?
                    .extractor,
            )
        } else {
            None
        };
        let bridge = pretrain_bridge_generator(&bundle, Some(&causal), &BridgeConfig::new(seed))
            .map_err(|e| e.to_string())?
            .generator;
        Ok(StructureFixture {
            bundle,
            causal,
            env,
            bridge,
        })
    }

    fn models(&self) -> SpliceModels<'_> {
        SpliceModels {
            causal: Some(&self.causal),
            env: self.env.as_ref(),
            bridge: Some(&self.bridge),
        }
    }

    fn augment(&self, options: &str, f: usize, seed: u64) -> Result<DatasetBundle, String> {
        let mut cfg = SpliceConfig::new(SpliceOptions::parse(options).map_err(|e| e.to_string())?);
        cfg.f = f;
        run_gsplice(&self.bundle, &cfg, self.models(), seed).map_err(|e| e.to_string())
    }
}

fn sizes_of(bundle: &DatasetBundle, option: Option<u8>) -> Vec<usize> {
    bundle
        .split(Split::Train)
        .filter(|(_, s)| s.option() == option)
        .map(|(_, s)| bundle.graph_of(s).num_nodes())
        .collect()
}

fn thm31(opts: &VerifyOptions) -> Vec<Check> {
    let fixture = match StructureFixture::build(GenTask::MotifSize, opts.seed, false) {
        Ok(f) => f,
        Err(e) => return vec![failed("fixture", e)],
    };
    let mut out = Vec::new();
    let train = sizes_of(&fixture.bundle, None);
    let (min_train, max_train) = (*train.iter().min().unwrap(), *train.iter().max().unwrap());
    match fixture.augment("1,3", 2, opts.seed) {
        Ok(aug) => {
            let opt1: Vec<_> = aug.split(Split::Train).filter(|(_, s)| s.option() == Some(1)).collect();
            let below_source = opt1
                .iter()
                .filter(|(_, s)| {
                    let src = s.meta.as_ref().unwrap().sources[0];
                    aug.graph_of(s).num_nodes() < aug.graph_of(&aug.samples[src]).num_nodes()
                })
                .count();
            let below_min = opt1.iter().filter(|(_, s)| aug.graph_of(s).num_nodes() < min_train).count();
            out.push(check(
                "option 1 smaller than its source",
                below_source == opt1.len() && !opt1.is_empty(),
                format!("{below_source}/{}", opt1.len()),
            ));
            out.push(check(
                "option 1 smaller than the smallest training graph",
                below_min == opt1.len() && !opt1.is_empty(),
                format!("{below_min}/{} below {min_train}", opt1.len()),
            ));
            let opt3: Vec<_> = aug.split(Split::Train).filter(|(_, s)| s.option() == Some(3)).collect();
            let additive = opt3
                .iter()
                .filter(|(_, s)| {
                    let srcs = &s.meta.as_ref().unwrap().sources;
                    let sum: usize = srcs.iter().map(|&i| aug.graph_of(&aug.samples[i]).num_nodes()).sum();
                    sum == aug.graph_of(s).num_nodes()
                })
                .count();
            out.push(check(
                "option 3 size equals sum of sources",
                additive == opt3.len() && !opt3.is_empty(),
                format!("{additive}/{}", opt3.len()),
            ));
            let max3 = sizes_of(&aug, Some(3)).into_iter().max().unwrap_or(0);
            out.push(check(
                "option 3 (f = 2) reaches beyond the largest training graph",
                max3 > max_train,
                format!("max {max3} vs training max {max_train}"),
            ));
        }
        Err(e) => out.push(failed("augment f = 2", e)),
    }
    // Every splice of three graphs exceeds the training maximum whenever
    // 3 * min > max, which holds on the size-shift bundle.
    match fixture.augment("3", 3, opts.seed) {
        Ok(aug) => {
            let sizes = sizes_of(&aug, Some(3));
            let above = sizes.iter().filter(|&&n| n > max_train).count();
            out.push(check(
                "option 3 (f = 3) all larger than the largest training graph",
                above == sizes.len() && !sizes.is_empty(),
                format!("{above}/{} above {max_train}", sizes.len()),
            ));
        }
        Err(e) => out.push(failed("augment f = 3", e)),
    }
    out.push(match splice_additivity(opts.splice_trials, opts.seed) {
        Ok(()) => check("splice additivity", true, format!("{} random splices", opts.splice_trials)),
        Err(e) => check("splice additivity", false, e),
    });
    out
}

/// Fraction of augmented samples of `option` whose oracle label equals the
/// assigned label exactly (samples without an intact motif count as misses).
fn label_match(aug: &DatasetBundle, option: u8) -> (usize, usize) {
    let c = aug.header.num_classes;
    let samples: Vec<_> = aug.split(Split::Train).filter(|(_, s)| s.option() == Some(option)).collect();
    let hits = samples
        .iter()
        .filter(|(_, s)| {
            let meta = s.meta.as_ref().expect("augmented meta");
            motif_oracle_label(aug.graph_of(s), meta, c).as_deref() == Some(s.label.as_slice())
        })
        .count();
    (hits, samples.len())
}

pub const LABEL_MATCH_THRESHOLD: f64 = 0.9;

fn thm32(opts: &VerifyOptions) -> Vec<Check> {
    let fixture = match StructureFixture::build(GenTask::MotifBase, opts.seed, true) {
        Ok(f) => f,
        Err(e) => return vec![failed("fixture", e)],
    };
    let aug = match fixture.augment("1,2,3", 2, opts.seed) {
        Ok(a) => a,
        Err(e) => return vec![failed("augment", e)],
    };
    let mut out = Vec::new();
    let (h3, n3) = label_match(&aug, 3);
    out.push(check("option 3 labels exact", h3 == n3 && n3 > 0, format!("{h3}/{n3}")));
    for option in [1u8, 2] {
        let (h, n) = label_match(&aug, option);
        let rate = h as f64 / n.max(1) as f64;
        out.push(check(
            &format!("option {option} label match rate"),
            n > 0 && rate >= LABEL_MATCH_THRESHOLD,
            format!("{h}/{n} = {rate:.3}"),
        ));
    }
    out
}

pub const COVERAGE_THRESHOLD: f64 = 0.95;

/// Fraction of 20 equal bins of `[0, 1)` hit by `draws` extrapolations
/// between two environments with feature values 0.1 and 0.2.
pub fn bin_coverage(draws: usize, seed: u64) -> f64 {
    const BINS: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = [0.1, 0.2];
    let mut hit = [false; BINS];
    for _ in 0..draws {
        let first = rng.random_range(0..2);
        let (x1, x2) = (support[first], support[1 - first]);
        let lambda = sample_lambda(2.0, 1.0, &mut rng);
        let y = extrapolate_row(&[x1], &[x2], &[true], lambda, lambda, &[(0.0, 1.0)])[0];
        hit[((y * BINS as f64) as usize).min(BINS - 1)] = true;
    }
    hit.iter().filter(|&&h| h).count() as f64 / BINS as f64
}

fn thm51(opts: &VerifyOptions) -> Vec<Check> {
    let cov = bin_coverage(opts.coverage_draws, opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 7);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_lambda(2.0, 1.0, &mut rng)).sum::<f64>() / n as f64;
    vec![
        check(
            "bin coverage",
            cov >= COVERAGE_THRESHOLD,
            format!("{:.0}% of 20 bins after {} draws", cov * 100.0, opts.coverage_draws),
        ),
        check("gamma mean", (mean - 2.0).abs() <= 0.04, format!("mean of {n} draws {mean:.4}")),
    ]
}

fn determinism(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    let mut small = GenConfig::new(GenTask::MotifBase, opts.seed);
    small.counts = [60, 20, 20, 20, 20];
    let first = generate(&small).map(|b| to_jsonl(&b));
    let second = generate(&small).map(|b| to_jsonl(&b));
    let bundle = match (first, second) {
        (Ok(a), Ok(b)) => {
            out.push(check("dataset bytes", a == b, format!("{} bytes", a.len())));
            generate(&small).expect("generated above")
        }
        (Err(e), _) | (_, Err(e)) => return vec![failed("dataset", e)],
    };

    let mut cfg = RunConfig::new(Method::Erm, opts.seed);
    cfg.epochs = 3;
    cfg.hidden_dim = 16;
    match (train(&bundle, &cfg), train(&bundle, &cfg)) {
        (Ok(a), Ok(b)) => out.push(check(
            "training report",
            a.report == b.report && a.model.params.snapshot() == b.model.params.snapshot(),
            format!("{} epochs", a.report.rows.len()),
        )),
        (Err(e), _) | (_, Err(e)) => out.push(failed("training report", e)),
    }

    let augmented = || -> Result<String, String> {
        let mut ec = ExtractorConfig::new(ExtractorKind::Causal, opts.seed);
        ec.epochs = 2;
        let causal = pretrain_extractor(&bundle, &ec).map_err(|e| e.to_string())?.extractor;
        let mut bc = BridgeConfig::new(opts.seed);
        bc.epochs = 2;
        let bridge = pretrain_bridge_generator(&bundle, Some(&causal), &bc)
            .map_err(|e| e.to_string())?
            .generator;
        let models = SpliceModels {
            causal: Some(&causal),
            env: None,
            bridge: Some(&bridge),
        };
        let aug = run_gsplice(&bundle, &SpliceConfig::new(SpliceOptions::parse("101").unwrap()), models, opts.seed)
            .map_err(|e| e.to_string())?;
        Ok(to_jsonl(&aug))
    };
    match (augmented(), augmented()) {
        (Ok(a), Ok(b)) => out.push(check("augmented dataset bytes", a == b, format!("{} bytes", a.len()))),
        (Err(e), _) | (_, Err(e)) => out.push(failed("augmented dataset bytes", e)),
    }
    out
}
