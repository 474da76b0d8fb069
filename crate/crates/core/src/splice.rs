//! Structural extrapolation: splicing options, soft label assignment,
//! environment creation and the variance-regularized objective.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{random_connected_bridges, BridgeError, BridgeGenerator};
use crate::dataset::{DatasetBundle, LabeledSample, SampleMeta, ShiftDomain, Split, Subject, TaskKind};
use crate::extract::{ExtractError, Extractor};
use crate::graph::{component_offsets, splice, BridgeSet, Graph, GraphError};
use crate::nn::{Sparse, Tape, Var};

#[derive(Debug, Error)]
pub enum SpliceError {
    #[error("label assignment needs at least one causal component")]
    NoCausalComponent,
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(&'static str),
    #[error("invalid splice config: {0}")]
    Config(String),
    #[error("splicing needs a graph-level bundle with training graphs")]
    NoTrainingGraphs,
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeMode {
    Vae,
    Random,
}

impl std::str::FromStr for BridgeMode {
    type Err = SpliceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vae" => Ok(BridgeMode::Vae),
            "random" => Ok(BridgeMode::Random),
            other => Err(SpliceError::Config(format!("unknown bridge mode {other}"))),
        }
    }
}

/// Which of the three splicing options are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpliceOptions {
    /// A single causal extraction.
    pub causal: bool,
    /// One causal extraction spliced with `f` environmental extractions.
    pub causal_env: bool,
    /// `f` whole graphs spliced together.
    pub whole: bool,
}

impl SpliceOptions {
    /// Parses a bit string such as `101` (options 1 and 3) or a
    /// comma-separated list such as `1,3`.
    pub fn parse(s: &str) -> Result<Self, SpliceError> {
        let mut o = SpliceOptions {
            causal: false,
            causal_env: false,
            whole: false,
        };
        let s = s.trim();
        if s.len() == 3 && s.chars().all(|c| c == '0' || c == '1') {
            let bits: Vec<bool> = s.chars().map(|c| c == '1').collect();
            o.causal = bits[0];
            o.causal_env = bits[1];
            o.whole = bits[2];
            return Ok(o);
        }
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "1" => o.causal = true,
                "2" => o.causal_env = true,
                "3" => o.whole = true,
                other => return Err(SpliceError::Config(format!("unknown option {other}"))),
            }
        }
        Ok(o)
    }

    /// Selected option ids, ascending.
    pub fn ids(&self) -> Vec<u8> {
        [(1, self.causal), (2, self.causal_env), (3, self.whole)]
            .into_iter()
            .filter_map(|(id, on)| on.then_some(id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceConfig {
    pub options: SpliceOptions,
    /// Components per splice for options 2 and 3.
    pub f: usize,
    /// Augmented samples as a fraction of the original training set.
    pub pct: f64,
    pub bridge_mode: BridgeMode,
    /// Environment grouping of augmented samples; taken from the bundle
    /// when absent.
    pub shift_domain: Option<ShiftDomain>,
    pub gamma: f64,
}

impl SpliceConfig {
    pub fn new(options: SpliceOptions) -> Self {
        SpliceConfig {
            options,
            f: 2,
            pct: 1.0,
            bridge_mode: BridgeMode::Vae,
            shift_domain: None,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SpliceError> {
        if self.options.ids().is_empty() {
            return Err(SpliceError::Config("select at least one option".into()));
        }
        if (self.options.causal_env || self.options.whole) && self.f < 2 {
            return Err(SpliceError::Config("f must be at least 2 for options 2 and 3".into()));
        }
        if !(self.pct > 0.0 && self.pct.is_finite()) || !(self.gamma >= 0.0) {
            return Err(SpliceError::Config("pct must be positive and gamma nonnegative".into()));
        }
        Ok(())
    }
}

/// Pretrained models consumed by the splicing options.
#[derive(Clone, Copy, Default)]
pub struct SpliceModels<'a> {
    pub causal: Option<&'a Extractor>,
    pub env: Option<&'a Extractor>,
    pub bridge: Option<&'a BridgeGenerator>,
}

/// Mean of the causal components' labels; environmental components carry
/// no label mass.
pub fn assign_label(component_labels: &[Vec<f64>], causal_flags: &[bool]) -> Result<Vec<f64>, SpliceError> {
    let causal: Vec<&Vec<f64>> = component_labels
        .iter()
        .zip(causal_flags)
        .filter_map(|(l, &c)| c.then_some(l))
        .collect();
    let Some(first) = causal.first() else {
        return Err(SpliceError::NoCausalComponent);
    };
    let mut y = vec![0.0; first.len()];
    for l in &causal {
        for (a, b) in y.iter_mut().zip(l.iter()) {
            *a += b;
        }
    }
    let k = causal.len() as f64;
    Ok(y.into_iter().map(|v| v / k).collect())
}

/// Environment ids for augmented samples given their option ids. Size-like
/// domains give each option its own environment; the base domain groups
/// option 1 apart from options 2 and 3. Ids start at `next_id`.
pub fn assign_environments(options: &[u8], domain: ShiftDomain, next_id: usize) -> Vec<usize> {
    let group = |o: u8| match domain {
        ShiftDomain::Base => usize::from(o != 1),
        ShiftDomain::Size | ShiftDomain::Color => o as usize,
    };
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for &o in options {
        ids.entry(group(o)).or_insert(0);
    }
    for (k, v) in ids.values_mut().enumerate() {
        *v = next_id + k;
    }
    options.iter().map(|&o| ids[&group(o)]).collect()
}

/// Original (non-augmented) training graphs of a bundle.
struct Sources<'a> {
    bundle: &'a DatasetBundle,
    idx: Vec<usize>,
}

impl<'a> Sources<'a> {
    fn new(bundle: &'a DatasetBundle) -> Result<Self, SpliceError> {
        if bundle.header.task != TaskKind::Graph {
            return Err(SpliceError::NoTrainingGraphs);
        }
        let idx: Vec<usize> = bundle
            .split(Split::Train)
            .filter(|(_, s)| s.option().is_none())
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(SpliceError::NoTrainingGraphs);
        }
        Ok(Sources { bundle, idx })
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (usize, &'a LabeledSample) {
        let i = self.idx[rng.random_range(0..self.idx.len())];
        (i, &self.bundle.samples[i])
    }
}

fn graph(s: &LabeledSample) -> &Graph {
    s.graph().expect("graph-level sample")
}

fn context(s: &LabeledSample) -> Option<(usize, usize)> {
    Some((s.hard_label(), s.env))
}

/// An extraction with its provenance remapped onto the extracted nodes.
fn extraction(extractor: &Extractor, s: &LabeledSample) -> Result<(Graph, SampleMeta), SpliceError> {
    let (sub, map) = extractor.extract_with_map(graph(s), context(s))?;
    let meta = s.meta.as_ref().map(|m| m.remap(&map)).unwrap_or_default();
    Ok((sub, meta))
}

/// Joins components with generated or random bridges; infeasible predicted
/// counts retry with a single bridge.
fn join<R: Rng>(
    components: &[Graph],
    mode: BridgeMode,
    generator: Option<&BridgeGenerator>,
    attr_classes: usize,
    rng: &mut R,
) -> Result<(Graph, BridgeSet), SpliceError> {
    let refs: Vec<&Graph> = components.iter().collect();
    match (mode, generator) {
        (BridgeMode::Vae, Some(g)) => Ok(g.splice_generated(&refs, rng)?),
        (BridgeMode::Vae, None) => Err(SpliceError::MissingCheckpoint("bridge generator")),
        (BridgeMode::Random, g) => {
            let count = match g {
                Some(g) => g.sample_bridge_count(&refs, rng)?,
                None => refs.len() - 1,
            };
            let bridges = match random_connected_bridges(&refs, count, attr_classes, rng) {
                Err(BridgeError::InfeasibleBridgeCount { .. }) => random_connected_bridges(&refs, 1, attr_classes, rng)?,
                other => other?,
            };
            Ok((splice(&refs, &bridges)?, bridges))
        }
    }
}

/// Provenance of a splice: component metas shifted to their offsets plus
/// the new bridges.
fn spliced_meta(parts: &[(Graph, SampleMeta)], bridges: &BridgeSet, option: u8, sources: Vec<usize>) -> SampleMeta {
    let graphs: Vec<&Graph> = parts.iter().map(|(g, _)| g).collect();
    let (offsets, _) = component_offsets(&graphs);
    let mut meta = SampleMeta {
        option: Some(option),
        sources,
        ..SampleMeta::default()
    };
    for ((_, m), &o) in parts.iter().zip(&offsets) {
        let shifted = m.offset(o);
        meta.motif_nodes.extend(shifted.motif_nodes);
        meta.motifs.extend(shifted.motifs);
        meta.bridge_edges.extend(shifted.bridge_edges);
        meta.base_kinds.extend(shifted.base_kinds);
    }
    meta.bridge_edges.extend(bridges.iter().map(|b| (b.u, b.v)));
    meta
}

fn augmented(graph: Graph, label: Vec<f64>, meta: SampleMeta) -> LabeledSample {
    LabeledSample {
        subject: Subject::Graph(graph),
        label,
        env: 0,
        split: Split::Train,
        meta: Some(meta),
    }
}

/// Option 1: the causal extraction of a random training graph, carrying
/// its source label.
pub fn make_option1<R: Rng>(bundle: &DatasetBundle, causal: &Extractor, rng: &mut R) -> Result<LabeledSample, SpliceError> {
    let sources = Sources::new(bundle)?;
    option1(&sources, causal, rng)
}

fn option1<R: Rng>(sources: &Sources, causal: &Extractor, rng: &mut R) -> Result<LabeledSample, SpliceError> {
    let (i, s) = sources.draw(rng);
    let (sub, mut meta) = extraction(causal, s)?;
    meta.option = Some(1);
    meta.sources = vec![i];
    Ok(augmented(sub, s.label.clone(), meta))
}

/// Option 2: one causal extraction spliced with `f` environmental
/// extractions; labelled by the causal source alone.
pub fn make_option2<R: Rng>(
    bundle: &DatasetBundle,
    models: SpliceModels,
    mode: BridgeMode,
    f: usize,
    rng: &mut R,
) -> Result<LabeledSample, SpliceError> {
    let sources = Sources::new(bundle)?;
    option2(&sources, models, mode, f, rng)
}

fn option2<R: Rng>(
    sources: &Sources,
    models: SpliceModels,
    mode: BridgeMode,
    f: usize,
    rng: &mut R,
) -> Result<LabeledSample, SpliceError> {
    let causal = models.causal.ok_or(SpliceError::MissingCheckpoint("causal extractor"))?;
    let env = models.env.ok_or(SpliceError::MissingCheckpoint("environmental extractor"))?;
    let (ci, cs) = sources.draw(rng);
    let mut parts = vec![extraction(causal, cs)?];
    let mut ids = vec![ci];
    let mut labels = vec![cs.label.clone()];
    for _ in 0..f {
        let (ei, es) = sources.draw(rng);
        parts.push(extraction(env, es)?);
        ids.push(ei);
        labels.push(es.label.clone());
    }
    let graphs: Vec<Graph> = parts.iter().map(|(g, _)| g.clone()).collect();
    let (spliced, bridges) = join(&graphs, mode, models.bridge, sources.bundle.header.q, rng)?;
    let mut flags = vec![false; parts.len()];
    flags[0] = true;
    let label = assign_label(&labels, &flags)?;
    let meta = spliced_meta(&parts, &bridges, 2, ids);
    Ok(augmented(spliced, label, meta))
}

/// Option 3: `f` whole training graphs spliced together; labelled by the
/// mean of their labels.
pub fn make_option3<R: Rng>(
    bundle: &DatasetBundle,
    bridge: Option<&BridgeGenerator>,
    mode: BridgeMode,
    f: usize,
    rng: &mut R,
) -> Result<LabeledSample, SpliceError> {
    let sources = Sources::new(bundle)?;
    option3(&sources, bridge, mode, f, rng)
}

fn option3<R: Rng>(
    sources: &Sources,
    bridge: Option<&BridgeGenerator>,
    mode: BridgeMode,
    f: usize,
    rng: &mut R,
) -> Result<LabeledSample, SpliceError> {
    let mut parts = Vec::with_capacity(f);
    let mut ids = Vec::with_capacity(f);
    let mut labels = Vec::with_capacity(f);
    for _ in 0..f {
        let (i, s) = sources.draw(rng);
        parts.push((graph(s).clone(), s.meta.clone().unwrap_or_default()));
        ids.push(i);
        labels.push(s.label.clone());
    }
    let graphs: Vec<Graph> = parts.iter().map(|(g, _)| g.clone()).collect();
    let (spliced, bridges) = join(&graphs, mode, bridge, sources.bundle.header.q, rng)?;
    let label = assign_label(&labels, &vec![true; f])?;
    let meta = spliced_meta(&parts, &bridges, 3, ids);
    Ok(augmented(spliced, label, meta))
}

/// Appends `⌈pct·|train|⌉` augmented training samples split evenly across
/// the selected options (earlier options take the remainder), each option
/// group placed in its new environment(s).
pub fn run_gsplice(
    bundle: &DatasetBundle,
    cfg: &SpliceConfig,
    models: SpliceModels,
    seed: u64,
) -> Result<DatasetBundle, SpliceError> {
    cfg.validate()?;
    let options = cfg.options.ids();
    if cfg.options.causal || cfg.options.causal_env {
        models.causal.ok_or(SpliceError::MissingCheckpoint("causal extractor"))?;
    }
    if cfg.options.causal_env {
        models.env.ok_or(SpliceError::MissingCheckpoint("environmental extractor"))?;
    }
    if cfg.bridge_mode == BridgeMode::Vae && (cfg.options.causal_env || cfg.options.whole) {
        models.bridge.ok_or(SpliceError::MissingCheckpoint("bridge generator"))?;
    }
    let sources = Sources::new(bundle)?;
    let total = (cfg.pct * sources.idx.len() as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);

    let k = options.len();
    let mut samples = Vec::with_capacity(total);
    for (slot, &opt) in options.iter().enumerate() {
        let quota = total / k + usize::from(slot < total % k);
        for _ in 0..quota {
            let s = match opt {
                1 => option1(&sources, models.causal.expect("checked"), &mut rng)?,
                2 => option2(&sources, models, cfg.bridge_mode, cfg.f, &mut rng)?,
                _ => option3(&sources, models.bridge, cfg.bridge_mode, cfg.f, &mut rng)?,
            };
            samples.push(s);
        }
    }

    let domain = cfg.shift_domain.or(bundle.header.shift).unwrap_or(ShiftDomain::Size);
    let mut out = bundle.clone();
    let opts: Vec<u8> = samples.iter().map(|s| s.option().expect("augmented")).collect();
    let envs = assign_environments(&opts, domain, out.next_env_id());
    let mut registered: BTreeMap<usize, ()> = BTreeMap::new();
    for (s, (&env, &opt)) in samples.iter_mut().zip(envs.iter().zip(&opts)) {
        if registered.insert(env, ()).is_none() {
            let name = match domain {
                ShiftDomain::Base if opt == 1 => "gsplice-causal".to_string(),
                ShiftDomain::Base => "gsplice-mixed".to_string(),
                _ => format!("gsplice-option{opt}"),
            };
            let id = out.register_env(name);
            debug_assert_eq!(id, env);
        }
        s.env = env;
    }
    out.samples.extend(samples);
    Ok(out)
}

/// Mean per-sample loss plus `gamma` times the population variance of the
/// per-environment mean losses, given those means and environment sizes.
pub fn vrex_objective(env_means: &[f64], env_sizes: &[usize], gamma: f64) -> f64 {
    let total: usize = env_sizes.iter().sum();
    let mean = env_means
        .iter()
        .zip(env_sizes)
        .map(|(m, &n)| m * n as f64)
        .sum::<f64>()
        / total as f64;
    let k = env_means.len() as f64;
    let avg = env_means.iter().sum::<f64>() / k;
    let var = env_means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / k;
    mean + gamma * var
}

/// Tape version of [`vrex_objective`] over a column of per-sample losses.
pub fn vrex_on_tape(tape: &mut Tape, per_row: Var, envs: &[usize], gamma: f64) -> Var {
    let mean = tape.mean_all(per_row);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &e) in envs.iter().enumerate() {
        groups.entry(e).or_default().push(r);
    }
    let k = groups.len();
    let mut entries = Vec::with_capacity(envs.len());
    for (g, rows) in groups.values().enumerate() {
        let w = 1.0 / rows.len() as f64;
        entries.extend(rows.iter().map(|&r| (g, r, w)));
    }
    let env_means = tape.spmm(Rc::new(Sparse::new(k, envs.len(), entries)), per_row);
    let avg = tape.mean_all(env_means);
    let ones = tape.constant(Array2::ones((k, 1)));
    let avg_col = tape.matmul(ones, avg);
    let centered = tape.sub(env_means, avg_col);
    let sq = tape.mul(centered, centered);
    let var = tape.mean_all(sq);
    let penalty = tape.scale(var, gamma);
    tape.add(mean, penalty)
}
