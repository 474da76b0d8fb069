//! Pair-matched extraction of causal and environmental subgraphs through
//! weighted node similarity.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetBundle, GraphRecord, Split, TaskKind};
use crate::graph::{induced_subgraph_with_map, Graph, GraphError};
use crate::nn::{
    apply_batch_stats, scalar_sigmoid, AdamConfig, BatchStats, GnnEncoder, GnnKind, GraphBatch, Linear, Mode, NnError, ParamId,
    ParamStore, Sparse, Tape, Var,
};

/// Denominator guard for cosine similarity of near-zero embeddings.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("no valid training pairs: {0}")]
    NoValidPairs(String),
    #[error("invalid extractor config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Same label, different environment; predicts the label.
    Causal,
    /// Same environment, different label; predicts the environment.
    Env,
}

impl ExtractorKind {
    pub fn default_rho(self) -> f64 {
        match self {
            ExtractorKind::Causal => 0.35,
            ExtractorKind::Env => 0.65,
        }
    }

    /// Causal extraction matches better without the complement loss; the
    /// environmental one needs it to push label-carrying nodes out.
    pub fn default_complement_weight(self) -> f64 {
        match self {
            ExtractorKind::Causal => 0.0,
            ExtractorKind::Env => 1.0,
        }
    }
}

impl std::str::FromStr for ExtractorKind {
    type Err = ExtractError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "causal" => Ok(ExtractorKind::Causal),
            "env" | "environmental" => Ok(ExtractorKind::Env),
            other => Err(ExtractError::Config(format!("unknown extractor kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub input_dim: usize,
    /// Number of target classes (labels or training environments).
    pub num_targets: usize,
    /// Classes of the complementary target predicted from dropped nodes
    /// (training environments for causal, labels for environmental).
    pub num_complement_targets: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Keep ratio for top-k extraction.
    pub rho: f64,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub pairs_per_batch: usize,
    pub lr: f64,
    /// Weight of the mean keep-probability penalty.
    pub keep_penalty: f64,
    /// Temperature of the relaxed Bernoulli training mask.
    pub temperature: f64,
    /// Weight of the loss predicting the complementary target from the
    /// dropped nodes.
    pub complement_weight: f64,
    pub num_references: usize,
    pub seed: u64,
}

impl ExtractorConfig {
    pub fn new(kind: ExtractorKind, seed: u64) -> Self {
        ExtractorConfig {
            kind,
            input_dim: 1,
            num_targets: 2,
            num_complement_targets: 2,
            hidden_dim: 32,
            num_layers: 3,
            rho: kind.default_rho(),
            epochs: 60,
            pairs_per_epoch: 256,
            pairs_per_batch: 16,
            lr: 5e-3,
            keep_penalty: 1.0,
            temperature: 1.0,
            complement_weight: kind.default_complement_weight(),
            num_references: 24,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ExtractError> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(ExtractError::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.hidden_dim == 0 || self.num_layers == 0 || self.pairs_per_batch == 0 || self.num_references == 0 {
            return Err(ExtractError::Config("sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) || !(self.keep_penalty >= 0.0 && self.complement_weight >= 0.0) {
            return Err(ExtractError::Config(
                "lr and temperature must be positive, penalty weights nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Which graph of a pair the keep probabilities are for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    First,
    Second,
}

/// `w · cos(z1_i, z2_j)` for every node pair.
pub fn weighted_similarity(z1: &Array2<f64>, z2: &Array2<f64>, w: f64) -> Array2<f64> {
    let norm = |z: &Array2<f64>| {
        let mut out = z.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / (n + COSINE_EPS));
        }
        out
    };
    norm(z1).dot(&norm(z2).t()) * w
}

/// Sigmoid of the row maximum (first graph) or column maximum (second).
pub fn node_keep_probs(sim: &Array2<f64>, side: Side) -> Vec<f64> {
    let lanes = match side {
        Side::First => sim.rows(),
        Side::Second => sim.columns(),
    };
    lanes
        .into_iter()
        .map(|l| scalar_sigmoid(l.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .collect()
}

/// The `⌈ρ·n⌉` highest-probability nodes (ties broken by lower index).
pub fn topk_mask(probs: &[f64], rho: f64) -> Vec<bool> {
    let n = probs.len();
    let k = ((rho * n as f64).ceil() as usize).clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    for &v in &order[..k.min(n)] {
        keep[v] = true;
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    TopK(f64),
    Bernoulli,
}

/// Node mask drawn from keep probabilities. Bernoulli draws that keep
/// nothing fall back to top-k with ratio 0.5.
pub fn sample_mask<R: Rng>(probs: &[f64], mode: SampleMode, rng: &mut R) -> Vec<bool> {
    match mode {
        SampleMode::TopK(rho) => topk_mask(probs, rho),
        SampleMode::Bernoulli => {
            let keep: Vec<bool> = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
            if keep.iter().any(|&k| k) {
                keep
            } else {
                topk_mask(probs, 0.5)
            }
        }
    }
}

pub fn sample_subgraph<R: Rng>(g: &Graph, probs: &[f64], mode: SampleMode, rng: &mut R) -> Result<Graph, ExtractError> {
    if probs.len() != g.num_nodes() {
        return Err(ExtractError::Config(format!(
            "{} probabilities for {} nodes",
            probs.len(),
            g.num_nodes()
        )));
    }
    let keep = sample_mask(probs, mode, rng);
    Ok(induced_subgraph_with_map(g, &keep)?.0)
}

/// Two-layer GIN classifier reading a soft node mask.
#[derive(Debug, Clone)]
struct MaskedHead {
    encoder: GnnEncoder,
    out: Linear,
}

impl MaskedHead {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ExtractorConfig, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden_dim;
        MaskedHead {
            encoder: GnnEncoder::new(store, prefix, GnnKind::Gin, cfg.input_dim, h, 2, true, rng),
            out: Linear::new(store, &format!("{prefix}.out"), h, classes, rng),
        }
    }

    /// Logits from a soft node mask (`n × 1`), pooled by mask weight.
    fn logits(&self, tape: &mut Tape, store: &ParamStore, batch: &GraphBatch, mask: Var, mode: &mut Mode) -> Var {
        let x = tape.constant(batch.x.clone());
        let h = self.encoder.forward(tape, store, batch, x, Some(mask), mode);
        let weighted = tape.mul_rows(h, mask);
        let pooled = tape.spmm(batch.sum_pool.clone(), weighted);
        let mass = tape.spmm(batch.sum_pool.clone(), mask);
        let guard = tape.constant(Array2::from_elem((batch.num_graphs(), 1), 1e-6));
        let mass = tape.add(mass, guard);
        let pooled = tape.div_rows(pooled, mass);
        self.out.forward(tape, store, pooled)
    }
}

/// A training graph kept for inference-time matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub graph: Graph,
    pub label: usize,
    pub env: usize,
}

#[derive(Serialize, Deserialize)]
struct ReferenceRecord {
    graph: GraphRecord,
    label: usize,
    env: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ExtractorConfig,
    references: Vec<ReferenceRecord>,
}

/// A pretrained extractor. Keep probabilities of a lone graph are taken
/// against the reference graphs that would form a valid training pair with
/// it (all references when its label or environment is unknown).
#[derive(Debug, Clone)]
pub struct Extractor {
    pub config: ExtractorConfig,
    encoder: GnnEncoder,
    weight: ParamId,
    head: MaskedHead,
    complement_head: MaskedHead,
    pub params: ParamStore,
    references: Vec<Reference>,
    reference_embeddings: Vec<Array2<f64>>,
}

impl Extractor {
    fn build(config: &ExtractorConfig) -> Result<Self, ExtractError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let h = config.hidden_dim;
        let encoder = GnnEncoder::new(
            &mut params,
            "extractor.encoder",
            GnnKind::Gin,
            config.input_dim,
            h,
            config.num_layers,
            false,
            &mut rng,
        );
        let weight = params.add("extractor.w", Array2::from_elem((1, 1), 1.0));
        let head = MaskedHead::new(&mut params, "extractor.head", config, config.num_targets, &mut rng);
        let complement_head = MaskedHead::new(
            &mut params,
            "extractor.complement",
            config,
            config.num_complement_targets,
            &mut rng,
        );
        Ok(Extractor {
            config: config.clone(),
            encoder,
            weight,
            head,
            complement_head,
            params,
            references: Vec::new(),
            reference_embeddings: Vec::new(),
        })
    }

    pub fn w(&self) -> f64 {
        self.params.scalar(self.weight)
    }

    /// Encoder node embeddings in evaluation mode.
    pub fn embeddings(&self, g: &Graph) -> Array2<f64> {
        let batch = GraphBatch::new(&[g]);
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let z = self.encoder.forward(&mut tape, &self.params, &batch, x, None, &mut Mode::Eval);
        tape.value(z).clone()
    }

    pub fn similarity(&self, g1: &Graph, g2: &Graph) -> Array2<f64> {
        weighted_similarity(&self.embeddings(g1), &self.embeddings(g2), self.w())
    }

    fn set_references(&mut self, references: Vec<Reference>) {
        self.reference_embeddings = references.iter().map(|r| self.embeddings(&r.graph)).collect();
        self.references = references;
    }

    pub fn references(&self) -> &[Reference] {
        &self.references
    }

    fn is_partner(&self, r: &Reference, label: usize, env: usize) -> bool {
        match self.config.kind {
            ExtractorKind::Causal => r.label == label && r.env != env,
            ExtractorKind::Env => r.env == env && r.label != label,
        }
    }

    /// Keep probability of every node of `g`: the row-max similarity
    /// averaged over partner references. `context` is the (label, environment) of `g` if known.
    pub fn keep_probs(&self, g: &Graph, context: Option<(usize, usize)>) -> Vec<f64> {
        let z = self.embeddings(g);
        let w = self.w();
        let mut chosen: Vec<usize> = match context {
            Some((label, env)) => (0..self.references.len())
                .filter(|&k| self.is_partner(&self.references[k], label, env))
                .collect(),
            None => Vec::new(),
        };
        if chosen.is_empty() {
            chosen = (0..self.references.len()).collect();
        }
        let mut score = vec![0.0; g.num_nodes()];
        for &k in &chosen {
            let sim = weighted_similarity(&z, &self.reference_embeddings[k], w);
            for (s, row) in score.iter_mut().zip(sim.rows()) {
                *s += row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
        }
        score.into_iter().map(|s| scalar_sigmoid(s / chosen.len() as f64)).collect()
    }

    /// Deterministic top-k node mask.
    pub fn keep_mask(&self, g: &Graph, context: Option<(usize, usize)>) -> Vec<bool> {
        topk_mask(&self.keep_probs(g, context), self.config.rho)
    }

    /// Extracted subgraph plus the old→new node map.
    pub fn extract_with_map(
        &self,
        g: &Graph,
        context: Option<(usize, usize)>,
    ) -> Result<(Graph, Vec<Option<usize>>), ExtractError> {
        Ok(induced_subgraph_with_map(g, &self.keep_mask(g, context))?)
    }

    pub fn extract(&self, g: &Graph, context: Option<(usize, usize)>) -> Result<Graph, ExtractError> {
        Ok(self.extract_with_map(g, context)?.0)
    }

    /// Class prediction of the head from a hard extraction.
    pub fn predict_extracted(&self, g: &Graph, context: Option<(usize, usize)>) -> Result<usize, ExtractError> {
        let sub = self.extract(g, context)?;
        let batch = GraphBatch::new(&[&sub]);
        let mut tape = Tape::new();
        let ones = tape.constant(Array2::ones((sub.num_nodes(), 1)));
        let logits = self.head.logits(&mut tape, &self.params, &batch, ones, &mut Mode::Eval);
        let row = tape.value(logits).row(0).to_vec();
        Ok(crate::dataset::argmax(&row))
    }

    pub fn save(&self, path: &Path) -> Result<(), ExtractError> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            references: self
                .references
                .iter()
                .map(|r| ReferenceRecord {
                    graph: GraphRecord::from_graph(&r.graph),
                    label: r.label,
                    env: r.env,
                })
                .collect(),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| ExtractError::Checkpoint(e.to_string()))?;
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.params.write_binary(file, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let (stored, meta) = ParamStore::read_binary(file)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| ExtractError::Checkpoint(format!("metadata: {e}")))?;
        let mut ex = Extractor::build(&meta.config)?;
        ex.params.load_values(&stored)?;
        let references = meta
            .references
            .into_iter()
            .map(|r| {
                Ok(Reference {
                    graph: r.graph.into_graph().map_err(ExtractError::Checkpoint)?,
                    label: r.label,
                    env: r.env,
                })
            })
            .collect::<Result<Vec<_>, ExtractError>>()?;
        ex.set_references(references);
        Ok(ex)
    }
}

/// Training loss per epoch and the trained extractor.
pub struct ExtractorRun {
    pub extractor: Extractor,
    pub epoch_losses: Vec<f64>,
}

/// Original (non-augmented) graph-level training samples.
fn original_training(bundle: &DatasetBundle) -> Vec<usize> {
    bundle
        .split(Split::Train)
        .filter(|(_, s)| s.option().is_none() && s.graph().is_some())
        .map(|(i, _)| i)
        .collect()
}

/// Valid pairs: same label and different environment (causal) or same
/// environment and different label (environmental).
pub fn valid_pairs(bundle: &DatasetBundle, kind: ExtractorKind) -> Vec<(usize, usize)> {
    let idx = original_training(bundle);
    let mut pairs = Vec::new();
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let (si, sj) = (&bundle.samples[i], &bundle.samples[j]);
            let same_label = si.hard_label() == sj.hard_label();
            let same_env = si.env == sj.env;
            let ok = match kind {
                ExtractorKind::Causal => same_label && !same_env,
                ExtractorKind::Env => same_env && !same_label,
            };
            if ok {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Reference pool cycling over (label, environment) groups.
fn pick_references(bundle: &DatasetBundle, count: usize) -> Vec<Reference> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in original_training(bundle) {
        let s = &bundle.samples[i];
        groups.entry((s.hard_label(), s.env)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(count);
    let mut round = 0;
    while out.len() < count {
        let before = out.len();
        for members in groups.values() {
            if let Some(&i) = members.get(round) {
                if out.len() < count {
                    let s = &bundle.samples[i];
                    out.push(Reference {
                        graph: s.graph().expect("graph sample").clone(),
                        label: s.hard_label(),
                        env: s.env,
                    });
                }
            }
        }
        if out.len() == before {
            break;
        }
        round += 1;
    }
    out
}

/// Trains an extractor on pairs drawn from the training split.
pub fn pretrain_extractor(bundle: &DatasetBundle, config: &ExtractorConfig) -> Result<ExtractorRun, ExtractError> {
    if bundle.header.task != TaskKind::Graph {
        return Err(ExtractError::Config("extraction needs a graph-level bundle".into()));
    }
    let envs = bundle.train_envs();
    let env_index: BTreeMap<usize, usize> = envs.iter().enumerate().map(|(k, &e)| (e, k)).collect();
    let mut cfg = config.clone();
    cfg.input_dim = bundle.header.p;
    let (own, other) = match cfg.kind {
        ExtractorKind::Causal => (bundle.header.num_classes, envs.len()),
        ExtractorKind::Env => (envs.len(), bundle.header.num_classes),
    };
    cfg.num_targets = own;
    cfg.num_complement_targets = other;
    let pairs = valid_pairs(bundle, cfg.kind);
    if pairs.is_empty() {
        return Err(ExtractError::NoValidPairs(match cfg.kind {
            ExtractorKind::Causal => "causal pairs need one label in two environments".into(),
            ExtractorKind::Env => "environmental pairs need two labels in one environment".into(),
        }));
    }
    let mut ex = Extractor::build(&cfg)?;
    let adam = AdamConfig::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let label_of = |i: usize| bundle.samples[i].label.clone();
    let env_of = |i: usize| {
        let mut t = vec![0.0; envs.len()];
        t[env_index[&bundle.samples[i].env]] = 1.0;
        t
    };
    let target_matrix = |members: &[usize], complement: bool| {
        let use_label = (cfg.kind == ExtractorKind::Causal) != complement;
        let rows: Vec<Vec<f64>> = members
            .iter()
            .map(|&i| if use_label { label_of(i) } else { env_of(i) })
            .collect();
        Rc::new(Array2::from_shape_fn((rows.len(), rows[0].len()), |(r, c)| rows[r][c]))
    };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let drawn: Vec<(usize, usize)> = (0..cfg.pairs_per_epoch.max(1))
            .map(|_| *pairs.choose(&mut rng).expect("nonempty pairs"))
            .collect();
        let mut total = 0.0;
        for chunk in drawn.chunks(cfg.pairs_per_batch) {
            let mut members = Vec::with_capacity(2 * chunk.len());
            for &(i, j) in chunk {
                members.push(i);
                members.push(j);
            }
            let graphs: Vec<&Graph> = members.iter().map(|&i| bundle.samples[i].graph().unwrap()).collect();
            let batch = GraphBatch::new(&graphs);
            let targets = PairTargets {
                own: target_matrix(&members, false),
                complement: target_matrix(&members, true),
            };
            let mut stats = Vec::new();
            let mut tape = Tape::new();
            let loss = pair_loss(&ex, &mut tape, &batch, &targets, &mut stats, &mut rng);
            total += tape.scalar(loss);
            tape.backward(loss, &mut ex.params)?;
            ex.params.adam_step(&adam);
            apply_batch_stats(&mut ex.params, &stats);
        }
        epoch_losses.push(total / drawn.len().div_ceil(cfg.pairs_per_batch) as f64);
    }
    let refs = pick_references(bundle, cfg.num_references);
    ex.set_references(refs);
    Ok(ExtractorRun {
        extractor: ex,
        epoch_losses,
    })
}

struct PairTargets {
    own: Rc<Array2<f64>>,
    complement: Rc<Array2<f64>>,
}

/// Loss for a batch whose graphs are consecutive pairs: the masked graph
/// predicts the own target, the dropped nodes predict the complementary
/// one, and a penalty on mean keep probability.
fn pair_loss(
    ex: &Extractor,
    tape: &mut Tape,
    batch: &GraphBatch,
    targets: &PairTargets,
    stats: &mut Vec<BatchStats>,
    rng: &mut ChaCha8Rng,
) -> Var {
    let n = batch.num_nodes();
    let x = tape.constant(batch.x.clone());
    let z = {
        let mut mode = Mode::Train { dropout: None, stats };
        ex.encoder.forward(tape, &ex.params, batch, x, None, &mut mode)
    };
    let zn = tape.row_normalize(z, COSINE_EPS);
    let w = tape.param(&ex.params, ex.weight);
    let mut scores: Option<Var> = None;
    for k in (0..batch.num_graphs()).step_by(2) {
        let (a0, a1) = (batch.offsets[k], batch.offsets[k + 1]);
        let (b0, b1) = (batch.offsets[k + 1], batch.offsets[k + 2]);
        let pick = |lo: usize, hi: usize| Rc::new(Sparse::new(hi - lo, n, (lo..hi).map(|v| (v - lo, v, 1.0)).collect()));
        let place = |lo: usize, hi: usize| Rc::new(Sparse::new(n, hi - lo, (lo..hi).map(|v| (v, v - lo, 1.0)).collect()));
        let za = tape.spmm(pick(a0, a1), zn);
        let zb = tape.spmm(pick(b0, b1), zn);
        let zbt = tape.transpose(zb);
        let cos = tape.matmul(za, zbt);
        let sim = tape.mul_scalar(cos, w);
        let max_a = tape.row_max(sim);
        let sim_t = tape.transpose(sim);
        let max_b = tape.row_max(sim_t);
        let sa = tape.spmm(place(a0, a1), max_a);
        let sb = tape.spmm(place(b0, b1), max_b);
        let both = tape.add(sa, sb);
        scores = Some(match scores {
            Some(m) => tape.add(m, both),
            None => both,
        });
    }
    let scores = scores.expect("at least one pair");
    let probs = tape.sigmoid(scores);
    // Relaxed Bernoulli sample: logistic noise on the logits.
    let noise = Array2::from_shape_simple_fn((n, 1), || {
        let u: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        (u / (1.0 - u)).ln()
    });
    let noise = tape.constant(noise);
    let noisy = tape.add(scores, noise);
    let noisy = tape.scale(noisy, 1.0 / ex.config.temperature);
    let mask = tape.sigmoid(noisy);
    let mut mode = Mode::Train { dropout: None, stats };
    let logits = ex.head.logits(tape, &ex.params, batch, mask, &mut mode);
    let ce = tape.softmax_ce(logits, targets.own.clone());
    let mut loss = tape.mean_all(ce);
    if ex.config.complement_weight > 0.0 {
        let ones = tape.constant(Array2::ones((n, 1)));
        let dropped = tape.sub(ones, mask);
        let logits = ex.complement_head.logits(tape, &ex.params, batch, dropped, &mut mode);
        let ce = tape.softmax_ce(logits, targets.complement.clone());
        let ce = tape.mean_all(ce);
        let ce = tape.scale(ce, ex.config.complement_weight);
        loss = tape.add(loss, ce);
    }
    let keep = tape.mean_all(probs);
    let keep = tape.scale(keep, ex.config.keep_penalty);
    tape.add(loss, keep)
}

/// Fraction of `truth` nodes recovered relative to the union with `kept`.
pub fn node_iou(kept: &[bool], truth: &[usize]) -> f64 {
    let truth_set: std::collections::BTreeSet<usize> = truth.iter().copied().collect();
    let kept_set: std::collections::BTreeSet<usize> = kept.iter().enumerate().filter(|(_, &k)| k).map(|(v, _)| v).collect();
    let inter = kept_set.intersection(&truth_set).count();
    let union = kept_set.union(&truth_set).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
