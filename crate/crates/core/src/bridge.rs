//! Conditional VAE bridge generator, bridge-count predictor and the
//! random-bridge baseline.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{argmax, DatasetBundle, Split, TaskKind};
use crate::extract::{ExtractError, Extractor};
use crate::graph::{component_of_nodes, component_offsets, induced_subgraph_with_map, splice, Bridge, BridgeSet, Graph, GraphError, UnionFind};
use crate::nn::{
    apply_batch_stats, scalar_sigmoid, softplus, AdamConfig, BatchStats, GnnEncoder, GnnKind, GraphBatch, Linear, Mode,
    NnError, ParamStore, Sparse, Tape, Var,
};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("requested {requested} bridges but only {available} cross-component pairs exist")]
    InfeasibleBridgeCount { requested: usize, available: usize },
    #[error("nodes {0} and {1} lie in the same component")]
    SameComponentPair(usize, usize),
    #[error("bridges need at least two components")]
    TooFewComponents,
    #[error("no partition available: bundle has no generator meta and no extractor was given")]
    NoPartitionAvailable,
    #[error("invalid bridge config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub input_dim: usize,
    /// Edge-attribute classes (one-hot attribute vectors); 0 when edges
    /// carry no features.
    pub attr_classes: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub latent_dim: usize,
    /// Largest predicted bridge count.
    pub max_bridges: usize,
    /// Weight of the attribute reconstruction term.
    pub alpha: f64,
    /// Weight of the KL term.
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl BridgeConfig {
    pub fn new(seed: u64) -> Self {
        BridgeConfig {
            input_dim: 1,
            attr_classes: 0,
            hidden_dim: 32,
            num_layers: 3,
            latent_dim: 16,
            max_bridges: 4,
            alpha: 1.0,
            beta: 0.1,
            epochs: 30,
            lr: 5e-3,
            batch_size: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        if self.hidden_dim == 0 || self.num_layers == 0 || self.latent_dim == 0 || self.max_bridges == 0 {
            return Err(BridgeError::Config("sizes must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(BridgeError::Config("alpha, beta must be nonnegative; lr, batch_size positive".into()));
        }
        Ok(())
    }
}

/// Factorized Gaussian posterior over per-node latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDist {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub component_of: Vec<usize>,
}

impl LatentDist {
    pub fn num_nodes(&self) -> usize {
        self.mu.nrows()
    }

    /// Reparameterized draw `μ + σ ⊙ ε`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Array2<f64> {
        let eps: Array2<f64> = Array2::from_shape_simple_fn(self.mu.dim(), || StandardNormal.sample(rng));
        &self.mu + &(&self.sigma * &eps)
    }

    /// All cross-component node pairs `(i, j)` with `i < j`.
    pub fn cross_pairs(&self) -> Vec<(usize, usize)> {
        cross_pairs(&self.component_of)
    }
}

pub fn cross_pairs(component_of: &[usize]) -> Vec<(usize, usize)> {
    let n = component_of.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if component_of[i] != component_of[j] {
                out.push((i, j));
            }
        }
    }
    out
}

/// Closed-form `KL[N(μ, σ²) ‖ N(0, I)]` summed over latent dimensions and
/// averaged over nodes.
pub fn kl_divergence(mu: &Array2<f64>, sigma: &Array2<f64>) -> f64 {
    let n = mu.nrows().max(1) as f64;
    mu.iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
        .sum::<f64>()
        / n
}

/// Decoded bridge scores for a set of candidate pairs.
#[derive(Debug, Clone)]
pub struct DecodedPairs {
    pub pairs: Vec<(usize, usize)>,
    pub logits: Vec<f64>,
    /// Attribute-class logits per pair when attributes are modeled.
    pub attr_logits: Option<Array2<f64>>,
}

impl DecodedPairs {
    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| scalar_sigmoid(l)).collect()
    }
}

/// Scalar form of the objective: mean BCE over cross pairs, plus `α` times
/// the mean attribute cross-entropy over true bridges, plus `β·KL`.
pub fn vae_loss(
    latent: &LatentDist,
    true_bridges: &BridgeSet,
    decoded: &DecodedPairs,
    alpha: f64,
    beta: f64,
) -> f64 {
    let m = decoded.pairs.len().max(1) as f64;
    let bce: f64 = decoded
        .pairs
        .iter()
        .zip(&decoded.logits)
        .map(|(&(i, j), &l)| {
            let t = if true_bridges.contains_pair(i, j) { 1.0 } else { 0.0 };
            softplus(l) - t * l
        })
        .sum::<f64>()
        / m;
    let mut attr = 0.0;
    if let Some(a) = &decoded.attr_logits {
        let mut count = 0.0;
        for b in true_bridges {
            let Some(vec) = &b.attr else { continue };
            let Some(r) = decoded
                .pairs
                .iter()
                .position(|&(i, j)| (i, j) == (b.u.min(b.v), b.u.max(b.v)))
            else {
                continue;
            };
            let row = a.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            attr += lse - row[argmax(vec)];
            count += 1.0;
        }
        if count > 0.0 {
            attr /= count;
        }
    }
    bce + alpha * attr + beta * kl_divergence(&latent.mu, &latent.sigma)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: BridgeConfig,
}

/// The trained generator: encoder `φ`, decoder `θ`, count predictor `η`.
#[derive(Debug, Clone)]
pub struct BridgeGenerator {
    pub config: BridgeConfig,
    encoder: GnnEncoder,
    mu_head: Linear,
    log_sigma_head: Linear,
    decoder_hidden: Linear,
    decoder_out: Linear,
    attr_out: Option<Linear>,
    count_encoder: GnnEncoder,
    count_out: Linear,
    pub params: ParamStore,
}

/// One pretraining instance: components and their true bridges.
#[derive(Debug, Clone)]
pub struct BridgeExample {
    pub components: Vec<Graph>,
    pub bridges: BridgeSet,
}

impl BridgeGenerator {
    pub fn new(config: &BridgeConfig) -> Result<Self, BridgeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (h, f) = (config.hidden_dim, config.latent_dim);
        let encoder = GnnEncoder::new(
            &mut params,
            "bridge.encoder",
            GnnKind::Gin,
            config.input_dim,
            h,
            config.num_layers,
            true,
            &mut rng,
        );
        let mu_head = Linear::new(&mut params, "bridge.mu", h, f, &mut rng);
        let log_sigma_head = Linear::new(&mut params, "bridge.log_sigma", h, f, &mut rng);
        let decoder_hidden = Linear::new(&mut params, "bridge.decoder.hidden", f, h, &mut rng);
        let decoder_out = Linear::new(&mut params, "bridge.decoder.out", h, 1, &mut rng);
        params.value_mut(decoder_out.weight).fill(0.0);
        // Start the posterior at unit variance.
        params.value_mut(log_sigma_head.weight).fill(0.0);
        let attr_out = (config.attr_classes > 0)
            .then(|| Linear::new(&mut params, "bridge.decoder.attr", h, config.attr_classes, &mut rng));
        let count_encoder = GnnEncoder::new(
            &mut params,
            "bridge.count.encoder",
            GnnKind::Gin,
            config.input_dim,
            h,
            2,
            true,
            &mut rng,
        );
        let count_out = Linear::new(&mut params, "bridge.count.out", h, config.max_bridges, &mut rng);
        Ok(BridgeGenerator {
            config: config.clone(),
            encoder,
            mu_head,
            log_sigma_head,
            decoder_hidden,
            decoder_out,
            attr_out,
            count_encoder,
            count_out,
            params,
        })
    }

    fn check_components(&self, components: &[&Graph]) -> Result<(), BridgeError> {
        if components.is_empty() {
            return Err(BridgeError::TooFewComponents);
        }
        for c in components {
            if c.feature_dim() != self.config.input_dim {
                return Err(NnError::ShapeMismatch(format!(
                    "component has {} features, generator expects {}",
                    c.feature_dim(),
                    self.config.input_dim
                ))
                .into());
            }
        }
        Ok(())
    }

    /// Tape forward of the posterior: `(μ, log σ)` for every node of the
    /// batched components.
    fn posterior_on_tape(&self, params: &ParamStore, tape: &mut Tape, batch: &GraphBatch, mode: &mut Mode) -> (Var, Var) {
        let x = tape.constant(batch.x.clone());
        let h = self.encoder.forward(tape, params, batch, x, None, mode);
        let mu = self.mu_head.forward(tape, params, h);
        let log_sigma = self.log_sigma_head.forward(tape, params, h);
        (mu, log_sigma)
    }

    /// Each component encoded independently (as a disjoint union).
    pub fn encode(&self, components: &[&Graph]) -> Result<LatentDist, BridgeError> {
        self.check_components(components)?;
        let batch = GraphBatch::new(components);
        let mut tape = Tape::new();
        let (mu, log_sigma) = self.posterior_on_tape(&self.params, &mut tape, &batch, &mut Mode::Eval);
        Ok(LatentDist {
            mu: tape.value(mu).clone(),
            sigma: tape.value(log_sigma).mapv(f64::exp),
            component_of: component_of_nodes(components),
        })
    }

    /// Logits (and attribute logits) for pair inputs `z_i + z_j`.
    fn decode_on_tape(&self, params: &ParamStore, tape: &mut Tape, z: Var, n: usize, pairs: &[(usize, usize)]) -> (Var, Option<Var>) {
        let entries = pairs
            .iter()
            .enumerate()
            .flat_map(|(r, &(i, j))| [(r, i, 1.0), (r, j, 1.0)])
            .collect();
        let sum = tape.spmm(Rc::new(Sparse::new(pairs.len(), n, entries)), z);
        let h = self.decoder_hidden.forward(tape, params, sum);
        let h = tape.relu(h);
        let logit = self.decoder_out.forward(tape, params, h);
        let attr = self.attr_out.as_ref().map(|a| a.forward(tape, params, h));
        (logit, attr)
    }

    /// Bridge logit and attribute logits for one node pair.
    pub fn decode_pair(&self, latent: &LatentDist, z: &Array2<f64>, i: usize, j: usize) -> Result<(f64, Option<Vec<f64>>), BridgeError> {
        if latent.component_of[i] == latent.component_of[j] {
            return Err(BridgeError::SameComponentPair(i, j));
        }
        let d = self.decode(z, &[(i, j)]);
        Ok((d.logits[0], d.attr_logits.map(|a| a.row(0).to_vec())))
    }

    /// Decoded scores for `pairs` under latent sample `z`.
    pub fn decode(&self, z: &Array2<f64>, pairs: &[(usize, usize)]) -> DecodedPairs {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (logit, attr) = self.decode_on_tape(&self.params, &mut tape, zv, z.nrows(), pairs);
        DecodedPairs {
            pairs: pairs.to_vec(),
            logits: tape.value(logit).column(0).to_vec(),
            attr_logits: attr.map(|a| tape.value(a).clone()),
        }
    }

    fn count_logits_on_tape(&self, params: &ParamStore, tape: &mut Tape, batch: &GraphBatch, groups: &[usize], mode: &mut Mode) -> Var {
        let x = tape.constant(batch.x.clone());
        let h = self.count_encoder.forward(tape, params, batch, x, None, mode);
        let pooled = tape.spmm(batch.mean_pool.clone(), h);
        // Sum component embeddings of each instance.
        let instances = groups.iter().max().map_or(0, |m| m + 1);
        let entries = groups.iter().enumerate().map(|(c, &g)| (g, c, 1.0)).collect();
        let summed = tape.spmm(Rc::new(Sparse::new(instances, groups.len(), entries)), pooled);
        self.count_out.forward(tape, params, summed)
    }

    /// Distribution over bridge counts `1..=max_bridges`.
    pub fn predict_bridge_count(&self, components: &[&Graph]) -> Result<Vec<f64>, BridgeError> {
        self.check_components(components)?;
        let batch = GraphBatch::new(components);
        let mut tape = Tape::new();
        let groups = vec![0; components.len()];
        let logits = self.count_logits_on_tape(&self.params, &mut tape, &batch, &groups, &mut Mode::Eval);
        let row = tape.value(logits).row(0).to_vec();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|x| x / s).collect())
    }

    /// A count drawn from the predicted distribution.
    pub fn sample_bridge_count<R: Rng>(&self, components: &[&Graph], rng: &mut R) -> Result<usize, BridgeError> {
        let probs = self.predict_bridge_count(components)?;
        Ok(sample_index(&probs, rng) + 1)
    }

    /// `count` bridges sampled without replacement in proportion to decoded
    /// probabilities, with optional connectivity repair.
    pub fn sample_bridges<R: Rng>(
        &self,
        components: &[&Graph],
        latent: &LatentDist,
        count: usize,
        repair: bool,
        rng: &mut R,
    ) -> Result<BridgeSet, BridgeError> {
        let pairs = latent.cross_pairs();
        check_count(count, pairs.len(), components.len())?;
        let z = latent.sample(rng);
        let decoded = self.decode(&z, &pairs);
        let probs = decoded.probs();
        let chosen = weighted_without_replacement(&probs, count, rng);
        let attr_of = |r: usize, rng: &mut R| {
            decoded.attr_logits.as_ref().map(|a| {
                let row = a.row(r);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
                one_hot_vec(sample_index(&w, rng), row.len())
            })
        };
        let mut rows = chosen;
        if repair {
            rows = repair_connectivity(components, &pairs, &probs, rows);
        }
        let bridges = rows
            .into_iter()
            .map(|r| {
                let (i, j) = pairs[r];
                Bridge {
                    u: i,
                    v: j,
                    comp_u: latent.component_of[i],
                    comp_v: latent.component_of[j],
                    attr: attr_of(r, rng),
                }
            })
            .collect();
        Ok(BridgeSet::new(bridges)?)
    }

    /// Splice `components` with a predicted count of generated bridges.
    /// An infeasible predicted count falls back to a single bridge.
    pub fn splice_generated<R: Rng>(&self, components: &[&Graph], rng: &mut R) -> Result<(Graph, BridgeSet), BridgeError> {
        let latent = self.encode(components)?;
        let count = self.sample_bridge_count(components, rng)?;
        let bridges = match self.sample_bridges(components, &latent, count, true, rng) {
            Err(BridgeError::InfeasibleBridgeCount { .. }) => self.sample_bridges(components, &latent, 1, true, rng)?,
            other => other?,
        };
        Ok((splice(components, &bridges)?, bridges))
    }

    /// Training objective on a batch of examples under `params`: bridge
    /// BCE, weighted attribute CE and KL, plus the count-predictor CE.
    pub fn loss_on_tape(
        &self,
        params: &ParamStore,
        tape: &mut Tape,
        examples: &[&BridgeExample],
        stats: &mut Vec<BatchStats>,
        rng: &mut ChaCha8Rng,
    ) -> Var {
        let comps: Vec<&Graph> = examples.iter().flat_map(|e| e.components.iter()).collect();
        let batch = GraphBatch::new(&comps);
        let n = batch.num_nodes();
        let (mu, log_sigma) = {
            let mut mode = Mode::Train { dropout: None, stats };
            self.posterior_on_tape(params, tape, &batch, &mut mode)
        };
        let sigma = tape.exp(log_sigma);
        let eps = tape.constant(Array2::from_shape_simple_fn((n, self.config.latent_dim), || {
            StandardNormal.sample(rng)
        }));
        let noise = tape.mul(sigma, eps);
        let z = tape.add(mu, noise);

        // Pairs and targets across the whole batch (global node indices).
        let mut pairs = Vec::new();
        let mut targets = Vec::new();
        let mut pair_weights = Vec::new();
        let mut attr_rows = Vec::new();
        let mut node_base = 0;
        for e in examples {
            let refs: Vec<&Graph> = e.components.iter().collect();
            let local = cross_pairs(&component_of_nodes(&refs));
            let w = 1.0 / (local.len().max(1) * examples.len()) as f64;
            for &(i, j) in &local {
                let t = e.bridges.contains_pair(i, j);
                if let (true, Some(_)) = (t, self.attr_out.as_ref()) {
                    let b = e
                        .bridges
                        .iter()
                        .find(|b| (b.u.min(b.v), b.u.max(b.v)) == (i, j))
                        .expect("true bridge present");
                    if let Some(a) = &b.attr {
                        attr_rows.push((pairs.len(), argmax(a)));
                    }
                }
                pairs.push((node_base + i, node_base + j));
                targets.push(if t { 1.0 } else { 0.0 });
                pair_weights.push(w);
            }
            node_base += refs.iter().map(|g| g.num_nodes()).sum::<usize>();
        }
        let (logit, attr) = self.decode_on_tape(params, tape, z, n, &pairs);
        let bce = tape.bce_with_logits(logit, Rc::new(Array2::from_shape_vec((pairs.len(), 1), targets).unwrap()));
        let weights = tape.constant(Array2::from_shape_vec((1, pairs.len()), pair_weights).unwrap());
        let mut loss = tape.matmul(weights, bce);
        if let (Some(a), false) = (attr, attr_rows.is_empty()) {
            let classes = self.config.attr_classes;
            let pick = Sparse::new(
                attr_rows.len(),
                pairs.len(),
                attr_rows.iter().enumerate().map(|(r, &(p, _))| (r, p, 1.0)).collect(),
            );
            let chosen = tape.spmm(Rc::new(pick), a);
            let mut t = Array2::zeros((attr_rows.len(), classes));
            for (r, &(_, c)) in attr_rows.iter().enumerate() {
                t[[r, c]] = 1.0;
            }
            let ce = tape.softmax_ce(chosen, Rc::new(t));
            let ce = tape.mean_all(ce);
            let ce = tape.scale(ce, self.config.alpha);
            loss = tape.add(loss, ce);
        }
        // KL per node: ½(μ² + σ² − 1) − log σ, summed over dims, averaged over nodes.
        let mu2 = tape.mul(mu, mu);
        let s2 = tape.mul(sigma, sigma);
        let both = tape.add(mu2, s2);
        let half = tape.scale(both, 0.5);
        let kl = tape.sub(half, log_sigma);
        let kl = tape.sum_all(kl);
        let kl = tape.scale(kl, 1.0 / n as f64);
        // The −½ constant per dimension keeps KL exactly 0 at the prior.
        let offset = tape.constant_scalar(-0.5 * self.config.latent_dim as f64);
        let kl = tape.add(kl, offset);
        let kl = tape.scale(kl, self.config.beta);
        loss = tape.add(loss, kl);

        // Bridge-count predictor.
        let groups: Vec<usize> = examples
            .iter()
            .enumerate()
            .flat_map(|(k, e)| std::iter::repeat_n(k, e.components.len()))
            .collect();
        let mut mode = Mode::Train { dropout: None, stats };
        let count_logits = self.count_logits_on_tape(params, tape, &batch, &groups, &mut mode);
        let mut t = Array2::zeros((examples.len(), self.config.max_bridges));
        for (k, e) in examples.iter().enumerate() {
            t[[k, e.bridges.len().clamp(1, self.config.max_bridges) - 1]] = 1.0;
        }
        let ce = tape.softmax_ce(count_logits, Rc::new(t));
        let ce = tape.mean_all(ce);
        tape.add(loss, ce)
    }

    pub fn save(&self, path: &Path) -> Result<(), BridgeError> {
        let meta = serde_json::to_string(&CheckpointMeta {
            config: self.config.clone(),
        })
        .map_err(|e| BridgeError::Checkpoint(e.to_string()))?;
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.params.write_binary(file, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BridgeError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let (stored, meta) = ParamStore::read_binary(file)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| BridgeError::Checkpoint(format!("metadata: {e}")))?;
        let mut g = BridgeGenerator::new(&meta.config)?;
        g.params.load_values(&stored)?;
        Ok(g)
    }
}

fn check_count(count: usize, available: usize, components: usize) -> Result<(), BridgeError> {
    if components < 2 {
        return Err(BridgeError::TooFewComponents);
    }
    if count == 0 || count > available {
        return Err(BridgeError::InfeasibleBridgeCount {
            requested: count,
            available,
        });
    }
    Ok(())
}

fn one_hot_vec(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Index drawn in proportion to nonnegative weights (uniform if all zero).
fn sample_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

/// `count` distinct indices, each draw proportional to remaining weights.
fn weighted_without_replacement<R: Rng>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let w: Vec<f64> = remaining.iter().map(|&k| weights[k]).collect();
        let pick = sample_index(&w, rng);
        out.push(remaining.swap_remove(pick));
    }
    out
}

/// Make the spliced graph connected: while disconnected, add the
/// highest-probability pair joining two pieces, then drop the
/// lowest-probability redundant bridges to stay at the requested count.
fn repair_connectivity(components: &[&Graph], pairs: &[(usize, usize)], probs: &[f64], chosen: Vec<usize>) -> Vec<usize> {
    let (offsets, total) = component_offsets(components);
    let internal: Vec<(usize, usize)> = components
        .iter()
        .zip(&offsets)
        .flat_map(|(g, &o)| g.edges().iter().map(move |&(u, v)| (u + o, v + o)))
        .collect();
    let target = chosen.len();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let pieces_with = |rows: &[usize]| {
        let mut uf = UnionFind::new(total);
        for &(u, v) in &internal {
            uf.union(u, v);
        }
        for &r in rows {
            uf.union(pairs[r].0, pairs[r].1);
        }
        uf
    };
    let mut rows = chosen;
    loop {
        let mut uf = pieces_with(&rows);
        let root = uf.find(0);
        if (1..total).all(|v| uf.find(v) == root) {
            break;
        }
        let next = order
            .iter()
            .copied()
            .find(|&r| !rows.contains(&r) && uf.find(pairs[r].0) != uf.find(pairs[r].1));
        match next {
            Some(r) => rows.push(r),
            None => break,
        }
    }
    // Drop redundant bridges, least probable first, down to the target.
    let mut by_prob = rows.clone();
    by_prob.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)));
    for r in by_prob {
        if rows.len() <= target {
            break;
        }
        let without: Vec<usize> = rows.iter().copied().filter(|&x| x != r).collect();
        let mut before = pieces_with(&rows);
        let mut after = pieces_with(&without);
        let count = |uf: &mut UnionFind| (0..total).filter(|&v| uf.find(v) == v).count();
        if count(&mut after) == count(&mut before) {
            rows = without;
        }
    }
    rows
}

/// `count` cross-component bridges uniform without replacement; attributes
/// uniform over `attr_classes` when positive.
pub fn random_bridges<R: Rng>(
    components: &[&Graph],
    count: usize,
    attr_classes: usize,
    rng: &mut R,
) -> Result<BridgeSet, BridgeError> {
    let owner = component_of_nodes(components);
    let pairs = cross_pairs(&owner);
    check_count(count, pairs.len(), components.len())?;
    let chosen: Vec<&(usize, usize)> = pairs.choose_multiple(rng, count).collect();
    let bridges = chosen
        .into_iter()
        .map(|&(i, j)| Bridge {
            u: i,
            v: j,
            comp_u: owner[i],
            comp_v: owner[j],
            attr: (attr_classes > 0).then(|| one_hot_vec(rng.random_range(0..attr_classes), attr_classes)),
        })
        .collect();
    Ok(BridgeSet::new(bridges)?)
}

/// Uniform random bridges followed by connectivity repair: the initial
/// `count` pairs are a uniform subset, and joining pairs are added in a
/// uniformly random order.
pub fn random_connected_bridges<R: Rng>(
    components: &[&Graph],
    count: usize,
    attr_classes: usize,
    rng: &mut R,
) -> Result<BridgeSet, BridgeError> {
    let owner = component_of_nodes(components);
    let pairs = cross_pairs(&owner);
    check_count(count, pairs.len(), components.len())?;
    // The top `count` of i.i.d. uniform scores form a uniform subset.
    let scores: Vec<f64> = (0..pairs.len()).map(|_| rng.random::<f64>()).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(count);
    let rows = repair_connectivity(components, &pairs, &scores, order);
    let bridges = rows
        .into_iter()
        .map(|r| Bridge {
            u: pairs[r].0,
            v: pairs[r].1,
            comp_u: owner[pairs[r].0],
            comp_v: owner[pairs[r].1],
            attr: (attr_classes > 0).then(|| one_hot_vec(rng.random_range(0..attr_classes), attr_classes)),
        })
        .collect();
    Ok(BridgeSet::new(bridges)?)
}

/// Pretraining instances from generator meta: (base, motif) components with
/// the recorded attachment edge.
pub fn meta_examples(bundle: &DatasetBundle) -> Vec<BridgeExample> {
    let mut out = Vec::new();
    for (_, s) in bundle.split(Split::Train) {
        let (Some(g), Some(meta)) = (s.graph(), s.meta.as_ref()) else { continue };
        if s.option().is_some() || meta.motif_nodes.is_empty() || meta.bridge_edges.is_empty() {
            continue;
        }
        let in_motif: Vec<bool> = (0..g.num_nodes()).map(|v| meta.motif_nodes.contains(&v)).collect();
        if let Some(ex) = split_example(g, &in_motif) {
            out.push(ex);
        }
    }
    out
}

/// Pretraining instances from causal extraction: (causal, complement) with
/// the cut edges as targets.
pub fn extractor_examples(bundle: &DatasetBundle, extractor: &Extractor) -> Vec<BridgeExample> {
    let mut out = Vec::new();
    for (_, s) in bundle.split(Split::Train) {
        let Some(g) = s.graph() else { continue };
        if s.option().is_some() {
            continue;
        }
        let keep = extractor.keep_mask(g, Some((s.hard_label(), s.env)));
        if let Some(ex) = split_example(g, &keep) {
            out.push(ex);
        }
    }
    out
}

/// Components (complement, marked) and cut edges; `None` if a side is empty
/// or nothing crosses the cut.
fn split_example(g: &Graph, marked: &[bool]) -> Option<BridgeExample> {
    let rest: Vec<bool> = marked.iter().map(|&m| !m).collect();
    let (first, map_first) = induced_subgraph_with_map(g, &rest).ok()?;
    let (second, map_second) = induced_subgraph_with_map(g, marked).ok()?;
    let offset = first.num_nodes();
    let ef = g.edge_features();
    let mut bridges = Vec::new();
    for (k, &(u, v)) in g.edges().iter().enumerate() {
        if marked[u] == marked[v] {
            continue;
        }
        let (a, b) = if marked[u] { (v, u) } else { (u, v) };
        bridges.push(Bridge {
            u: map_first[a]?,
            v: map_second[b]? + offset,
            comp_u: 0,
            comp_v: 1,
            attr: ef.map(|e| e.row(k).to_vec()),
        });
    }
    if bridges.is_empty() {
        return None;
    }
    Some(BridgeExample {
        components: vec![first, second],
        bridges: BridgeSet::new(bridges).ok()?,
    })
}

pub struct BridgeRun {
    pub generator: BridgeGenerator,
    pub epoch_losses: Vec<f64>,
}

/// Trains the generator on meta-derived pairs, or extractor-derived pairs
/// when the bundle carries no meta.
pub fn pretrain_bridge_generator(
    bundle: &DatasetBundle,
    extractor: Option<&Extractor>,
    config: &BridgeConfig,
) -> Result<BridgeRun, BridgeError> {
    if bundle.header.task != TaskKind::Graph {
        return Err(BridgeError::Config("bridge generation needs a graph-level bundle".into()));
    }
    let mut examples = meta_examples(bundle);
    if examples.is_empty() {
        let ex = extractor.ok_or(BridgeError::NoPartitionAvailable)?;
        examples = extractor_examples(bundle, ex);
    }
    if examples.is_empty() {
        return Err(BridgeError::NoPartitionAvailable);
    }
    let mut cfg = config.clone();
    cfg.input_dim = bundle.header.p;
    cfg.attr_classes = bundle.header.q;
    let generator = BridgeGenerator::new(&cfg)?;
    train_on_examples(generator, &examples)
}

/// Optimizes the generator on explicit examples.
pub fn train_on_examples(mut generator: BridgeGenerator, examples: &[BridgeExample]) -> Result<BridgeRun, BridgeError> {
    let cfg = generator.config.clone();
    let adam = AdamConfig::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&BridgeExample> = chunk.iter().map(|&k| &examples[k]).collect();
            let mut tape = Tape::new();
            let mut stats = Vec::new();
            let loss = generator.loss_on_tape(&generator.params, &mut tape, &batch, &mut stats, &mut rng);
            total += tape.scalar(loss) * chunk.len() as f64;
            tape.backward(loss, &mut generator.params)?;
            generator.params.adam_step(&adam);
            apply_batch_stats(&mut generator.params, &stats);
        }
        epoch_losses.push(total / examples.len() as f64);
    }
    Ok(BridgeRun {
        generator,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> Graph {
        Graph::unit_features(n, (1..n).map(|v| (v - 1, v)).collect()).unwrap()
    }

    #[test]
    fn kl_is_zero_at_prior() {
        let mu = Array2::zeros((3, 4));
        let sigma = Array2::ones((3, 4));
        assert_eq!(kl_divergence(&mu, &sigma), 0.0);
        assert!(kl_divergence(&(mu + 0.3), &(sigma * 1.7)) > 0.0);
    }

    #[test]
    fn exhausting_all_pairs_selects_every_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picked = weighted_without_replacement(&[0.9, 1e-9, 0.2, 0.5], 4, &mut rng);
        let mut sorted = picked.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn random_bridges_reject_too_many() {
        let a = path(2);
        let b = path(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            random_bridges(&[&a, &b], 5, 0, &mut rng),
            Err(BridgeError::InfeasibleBridgeCount { requested: 5, available: 4 })
        ));
        let one = Graph::unit_features(1, vec![]).unwrap();
        let set = random_bridges(&[&one, &one], 1, 0, &mut rng).unwrap();
        let b = set.iter().next().unwrap();
        assert_eq!((b.u, b.v, b.comp_u, b.comp_v), (0, 1, 0, 1));
    }

    #[test]
    fn repair_connects_three_components() {
        let comps = [path(2), path(2), path(2)];
        let refs: Vec<&Graph> = comps.iter().collect();
        let owner = component_of_nodes(&refs);
        let pairs = cross_pairs(&owner);
        // Both initial picks join components 0 and 1.
        let first = pairs.iter().position(|&p| p == (0, 2)).unwrap();
        let second = pairs.iter().position(|&p| p == (1, 3)).unwrap();
        let probs = vec![0.5; pairs.len()];
        let rows = repair_connectivity(&refs, &pairs, &probs, vec![first, second]);
        assert_eq!(rows.len(), 2);
        let bridges = BridgeSet::new(
            rows.iter()
                .map(|&r| Bridge {
                    u: pairs[r].0,
                    v: pairs[r].1,
                    comp_u: owner[pairs[r].0],
                    comp_v: owner[pairs[r].1],
                    attr: None,
                })
                .collect(),
        )
        .unwrap();
        assert!(splice(&refs, &bridges).unwrap().is_connected());
    }
}
