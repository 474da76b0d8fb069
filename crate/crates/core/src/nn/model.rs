//! Message-passing encoders, linear layers and the graph/node classifier.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Sparse, Tape, Var};
use super::NnError;
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnKind {
    Gin,
    Gcn,
}

impl std::str::FromStr for GnnKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gin" => Ok(GnnKind::Gin),
            "gcn" => Ok(GnnKind::Gcn),
            other => Err(format!("unknown backbone {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub kind: GnnKind,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
    pub dropout: f64,
}

impl GnnConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return Err(NnError::ShapeMismatch(
                "num_layers, hidden_dim, input_dim and num_classes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::ShapeMismatch("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Several graphs batched as one disjoint union.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub x: Array2<f64>,
    pub offsets: Vec<usize>,
    /// Plain adjacency (sum over neighbors).
    pub neighbor_sum: Rc<Sparse>,
    /// `D^{-1/2} (A + I) D^{-1/2}`.
    pub gcn_norm: Rc<Sparse>,
    /// `num_graphs × num_nodes` averaging matrix.
    pub mean_pool: Rc<Sparse>,
    /// `num_graphs × num_nodes` membership matrix.
    pub sum_pool: Rc<Sparse>,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph]) -> Self {
        let feats: Vec<&Array2<f64>> = graphs.iter().map(|g| g.node_features()).collect();
        Self::with_features(graphs, &feats)
    }

    /// Batch with replacement node features (same row counts as the graphs).
    pub fn with_features(graphs: &[&Graph], features: &[&Array2<f64>]) -> Self {
        assert_eq!(graphs.len(), features.len(), "one feature matrix per graph");
        let mut offsets = vec![0];
        for g in graphs {
            offsets.push(offsets.last().unwrap() + g.num_nodes());
        }
        let n = *offsets.last().unwrap();
        let p = features.first().map_or(0, |f| f.ncols());
        let mut x = Array2::zeros((n, p));
        let mut adj = Vec::new();
        let mut degree = vec![1.0f64; n];
        for (k, (g, f)) in graphs.iter().zip(features).enumerate() {
            assert_eq!(f.nrows(), g.num_nodes(), "feature rows must match node count");
            let o = offsets[k];
            x.slice_mut(ndarray::s![o..o + g.num_nodes(), ..]).assign(f);
            for &(u, v) in g.edges() {
                adj.push((o + u, o + v, 1.0));
                adj.push((o + v, o + u, 1.0));
                degree[o + u] += 1.0;
                degree[o + v] += 1.0;
            }
        }
        let mut norm: Vec<(usize, usize, f64)> = adj
            .iter()
            .map(|&(u, v, _)| (u, v, 1.0 / (degree[u] * degree[v]).sqrt()))
            .collect();
        norm.extend((0..n).map(|v| (v, v, 1.0 / degree[v])));
        let b = graphs.len();
        let mut mean = Vec::with_capacity(n);
        let mut sum = Vec::with_capacity(n);
        for k in 0..b {
            let size = offsets[k + 1] - offsets[k];
            for v in offsets[k]..offsets[k + 1] {
                mean.push((k, v, 1.0 / size as f64));
                sum.push((k, v, 1.0));
            }
        }
        GraphBatch {
            x,
            offsets,
            neighbor_sum: Rc::new(Sparse::new(n, n, adj)),
            gcn_norm: Rc::new(Sparse::new(n, n, norm)),
            mean_pool: Rc::new(Sparse::new(b, n, mean)),
            sum_pool: Rc::new(Sparse::new(b, n, sum)),
        }
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.add_glorot(format!("{name}.weight"), input, output, rng),
            bias: store.add_zeros(format!("{name}.bias"), 1, output),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }
}

/// Running statistics gathered from one training forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Forward-pass mode. Training normalizes with batch statistics (recorded
/// for the running averages) and applies dropout when an RNG is given.
pub enum Mode<'a> {
    Eval,
    Train {
        dropout: Option<&'a mut ChaCha8Rng>,
        stats: &'a mut Vec<BatchStats>,
    },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Folds recorded batch statistics into the running averages.
pub fn apply_batch_stats(store: &mut ParamStore, stats: &[BatchStats]) {
    for s in stats {
        for (id, batch) in [(s.mean_id, &s.mean), (s.var_id, &s.var)] {
            let run = store.value_mut(id);
            for (r, &b) in run.iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Per-feature normalization with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    scale: ParamId,
    shift: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let running_mean = store.add_zeros(format!("{name}.running_mean"), 1, dim);
        let running_var = store.add(format!("{name}.running_var"), Array2::ones((1, dim)));
        store.set_frozen(running_mean, true);
        store.set_frozen(running_var, true);
        BatchNorm {
            scale: store.add(format!("{name}.scale"), Array2::ones((1, dim))),
            shift: store.add_zeros(format!("{name}.shift"), 1, dim),
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode) -> Var {
        let normalized = match mode {
            Mode::Train { stats, .. } => {
                let (y, mean, var) = tape.batch_norm(x, BN_EPS);
                stats.push(BatchStats {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean,
                    var,
                });
                y
            }
            Mode::Eval => {
                let mean = store.value(self.running_mean);
                let inv = store.value(self.running_var).mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let shift = tape.constant(-(mean * &inv));
                let inv = tape.constant(inv);
                let y = tape.mul_row(x, inv);
                tape.add_row(y, shift)
            }
        };
        let scale = tape.param(store, self.scale);
        let shift = tape.param(store, self.shift);
        let y = tape.mul_row(normalized, scale);
        tape.add_row(y, shift)
    }
}

#[derive(Debug, Clone)]
enum EncoderLayer {
    Gin {
        eps: ParamId,
        first: Linear,
        inner_norm: BatchNorm,
        second: Linear,
        outer_norm: BatchNorm,
    },
    Gcn {
        lin: Linear,
    },
}

/// Stack of GIN or GCN layers with ReLU between layers.
#[derive(Debug, Clone)]
pub struct GnnEncoder {
    pub kind: GnnKind,
    pub input_dim: usize,
    pub output_dim: usize,
    layers: Vec<EncoderLayer>,
    final_activation: bool,
}

impl GnnEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        kind: GnnKind,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        final_activation: bool,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d_in = if l == 0 { input_dim } else { hidden_dim };
                let name = format!("{prefix}.layer{l}");
                match kind {
                    GnnKind::Gin => EncoderLayer::Gin {
                        eps: store.add_zeros(format!("{name}.eps"), 1, 1),
                        first: Linear::new(store, &format!("{name}.mlp0"), d_in, hidden_dim, rng),
                        inner_norm: BatchNorm::new(store, &format!("{name}.mlp_norm"), hidden_dim),
                        second: Linear::new(store, &format!("{name}.mlp1"), hidden_dim, hidden_dim, rng),
                        outer_norm: BatchNorm::new(store, &format!("{name}.norm"), hidden_dim),
                    },
                    GnnKind::Gcn => EncoderLayer::Gcn {
                        lin: Linear::new(store, &format!("{name}.lin"), d_in, hidden_dim, rng),
                    },
                }
            })
            .collect();
        GnnEncoder {
            kind,
            input_dim,
            output_dim: hidden_dim,
            layers,
            final_activation,
        }
    }

    /// Node embeddings for the batch. `node_mask` (`n × 1`) scales node
    /// states before every layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &GraphBatch,
        x: Var,
        node_mask: Option<Var>,
        mode: &mut Mode,
    ) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(m) = node_mask {
                h = tape.mul_rows(h, m);
            }
            h = match layer {
                EncoderLayer::Gin {
                    eps,
                    first,
                    inner_norm,
                    second,
                    outer_norm,
                } => {
                    let agg = tape.spmm(batch.neighbor_sum.clone(), h);
                    let e = tape.param(store, *eps);
                    let scaled = tape.mul_scalar(h, e);
                    let own = tape.add(h, scaled);
                    let pre = tape.add(agg, own);
                    let z = first.forward(tape, store, pre);
                    let z = inner_norm.forward(tape, store, z, mode);
                    let z = tape.relu(z);
                    let z = second.forward(tape, store, z);
                    outer_norm.forward(tape, store, z, mode)
                }
                EncoderLayer::Gcn { lin } => {
                    let agg = tape.spmm(batch.gcn_norm.clone(), h);
                    lin.forward(tape, store, agg)
                }
            };
            if l < last || self.final_activation {
                h = tape.relu(h);
            }
        }
        h
    }
}

/// Encoder plus a two-layer head with dropout; pools for graph tasks.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub cfg: GnnConfig,
    pub encoder: GnnEncoder,
    head_hidden: Linear,
    head_out: Linear,
}

impl Classifier {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &GnnConfig, rng: &mut R) -> Result<Self, NnError> {
        cfg.validate()?;
        let encoder = GnnEncoder::new(
            store,
            "encoder",
            cfg.kind,
            cfg.input_dim,
            cfg.hidden_dim,
            cfg.num_layers,
            true,
            rng,
        );
        let head_hidden = Linear::new(store, "head.hidden", cfg.hidden_dim, cfg.hidden_dim, rng);
        let head_out = Linear::new(store, "head.out", cfg.hidden_dim, cfg.num_classes, rng);
        Ok(Classifier {
            cfg: cfg.clone(),
            encoder,
            head_hidden,
            head_out,
        })
    }

    fn check_width(&self, batch: &GraphBatch) -> Result<(), NnError> {
        if batch.x.ncols() != self.cfg.input_dim {
            return Err(NnError::ShapeMismatch(format!(
                "features have width {}, model expects {}",
                batch.x.ncols(),
                self.cfg.input_dim
            )));
        }
        Ok(())
    }

    /// Node embeddings and, with mean pooling, per-graph embeddings, in
    /// evaluation mode.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, batch: &GraphBatch) -> Result<(Var, Option<Var>), NnError> {
        self.check_width(batch)?;
        let x = tape.constant(batch.x.clone());
        let h = self.encoder.forward(tape, store, batch, x, None, &mut Mode::Eval);
        let pooled = match self.cfg.pooling {
            Pooling::Mean => Some(tape.spmm(batch.mean_pool.clone(), h)),
            Pooling::None => None,
        };
        Ok((h, pooled))
    }

    /// Logits per graph (mean pooling) or per node (no pooling).
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, batch: &GraphBatch, x: Var, mode: &mut Mode) -> Result<Var, NnError> {
        self.check_width(batch)?;
        let h = self.encoder.forward(tape, store, batch, x, None, mode);
        let rep = match self.cfg.pooling {
            Pooling::Mean => tape.spmm(batch.mean_pool.clone(), h),
            Pooling::None => h,
        };
        let z = self.head_hidden.forward(tape, store, rep);
        let mut z = tape.relu(z);
        if let Mode::Train { dropout: Some(rng), .. } = mode {
            if self.cfg.dropout > 0.0 {
                let keep = 1.0 - self.cfg.dropout;
                let dim = tape.value(z).dim();
                let mask = Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                let m = tape.constant(mask);
                z = tape.mul(z, m);
            }
        }
        Ok(self.head_out.forward(tape, store, z))
    }

    /// Inference logits as a plain matrix.
    pub fn predict(&self, store: &ParamStore, batch: &GraphBatch) -> Result<Array2<f64>, NnError> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let out = self.logits(&mut tape, store, batch, x, &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}
