//! Training runs, evaluation and checkpoint selection.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dataset::{argmax, DatasetBundle, Split, Subject, TaskKind};
use crate::featx::{FeatxConfig, FeatxTrainer, MaskState};
use crate::graph::Graph;
use crate::nn::{
    apply_batch_stats, AdamConfig, Classifier, GnnConfig, GnnKind, GraphBatch, Mode, ParamStore, Pooling, Sparse, Tape, Var,
};
use crate::splice::vrex_on_tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    Gsplice,
    GspliceR,
    Featx,
}

impl std::str::FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "erm" => Ok(Method::Erm),
            "gsplice" => Ok(Method::Gsplice),
            "gsplice-r" => Ok(Method::GspliceR),
            "featx" => Ok(Method::Featx),
            other => Err(HarnessError::Config(format!("unknown method {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    /// Backbone; defaults to GIN for graph tasks and GCN for node tasks.
    pub kind: Option<GnnKind>,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the per-environment loss variance penalty.
    pub gamma: f64,
    pub featx: FeatxConfig,
}

impl RunConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        RunConfig {
            method,
            kind: None,
            num_layers: 3,
            hidden_dim: 64,
            dropout: 0.5,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 32,
            seed,
            gamma: if method == Method::GspliceR { 1.0 } else { 0.0 },
            featx: FeatxConfig::default(),
        }
    }

    pub fn model_config(&self, bundle: &DatasetBundle) -> GnnConfig {
        let node = bundle.header.task == TaskKind::Node;
        GnnConfig {
            kind: self.kind.unwrap_or(if node { GnnKind::Gcn } else { GnnKind::Gin }),
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            input_dim: bundle.header.p,
            num_classes: bundle.header.num_classes,
            pooling: if node { Pooling::None } else { Pooling::Mean },
            dropout: self.dropout,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.gamma >= 0.0) {
            return Err(HarnessError::Config("lr must be positive and gamma nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub id_val_acc: f64,
    pub id_test_acc: f64,
    pub ood_val_acc: f64,
    pub ood_test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    /// Epoch maximizing OOD-validation accuracy (first on ties).
    pub selected_epoch: usize,
    pub ood_ood: f64,
    pub id_id_epoch: usize,
    pub id_id: f64,
}

impl MetricReport {
    pub fn from_rows(method: Method, seed: u64, rows: Vec<EpochRow>) -> Self {
        let best = |key: fn(&EpochRow) -> f64| {
            let mut b = 0;
            for (i, r) in rows.iter().enumerate() {
                if key(r) > key(&rows[b]) {
                    b = i;
                }
            }
            b
        };
        let o = best(|r| r.ood_val_acc);
        let i = best(|r| r.id_val_acc);
        MetricReport {
            method,
            seed,
            selected_epoch: rows[o].epoch,
            ood_ood: rows[o].ood_test_acc,
            id_id_epoch: rows[i].epoch,
            id_id: rows[i].id_test_acc,
            rows,
        }
    }
}

/// A trained classifier with its parameters.
pub struct TrainedModel {
    pub config: GnnConfig,
    pub classifier: Classifier,
    pub params: ParamStore,
}

pub struct TrainOutcome {
    pub report: MetricReport,
    /// Parameters at the selected (best OOD-validation) epoch.
    pub model: TrainedModel,
    pub featx: Option<MaskState>,
}

pub fn build_model(cfg: &GnnConfig, seed: u64) -> Result<(Classifier, ParamStore), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = Classifier::new(&mut store, cfg, &mut rng)?;
    Ok((c, store))
}

fn is_original(bundle: &DatasetBundle, idx: usize, featx_env: Option<usize>) -> bool {
    let s = &bundle.samples[idx];
    s.option().is_none() && Some(s.env) != featx_env
}

/// Training-split indices used by `method`. ERM drops augmented samples.
pub fn training_indices(bundle: &DatasetBundle, method: Method) -> Vec<usize> {
    let all = bundle.split_indices(Split::Train);
    match method {
        Method::Erm => all.into_iter().filter(|&i| is_original(bundle, i, None)).collect(),
        _ => all,
    }
}

pub(crate) fn targets(bundle: &DatasetBundle, idx: &[usize]) -> Array2<f64> {
    let c = bundle.header.num_classes;
    let mut t = Array2::zeros((idx.len(), c));
    for (r, &i) in idx.iter().enumerate() {
        for (j, &p) in bundle.samples[i].label.iter().enumerate() {
            t[[r, j]] = p;
        }
    }
    t
}

pub(crate) fn graphs_of<'a>(bundle: &'a DatasetBundle, idx: &[usize]) -> Vec<&'a Graph> {
    idx.iter().map(|&i| bundle.graph_of(&bundle.samples[i])).collect()
}

/// Sparse selector picking sample nodes out of the shared graph.
pub(crate) fn node_selector(bundle: &DatasetBundle, idx: &[usize], n: usize) -> Rc<Sparse> {
    let entries = idx
        .iter()
        .enumerate()
        .map(|(r, &i)| match bundle.samples[i].subject {
            Subject::Node(v) => (r, v, 1.0),
            Subject::Graph(_) => unreachable!("node selector on a graph-level sample"),
        })
        .collect();
    Rc::new(Sparse::new(idx.len(), n, entries))
}

/// Accuracy of argmax predictions against argmax labels on `split`.
pub fn evaluate(model: &TrainedModel, bundle: &DatasetBundle, split: Split) -> Result<f64, HarnessError> {
    let idx = bundle.split_indices(split);
    if idx.is_empty() {
        return Err(HarnessError::EmptySplit(split.as_str().into()));
    }
    if bundle.header.p != model.config.input_dim || bundle.header.num_classes != model.config.num_classes {
        return Err(HarnessError::ShapeMismatch(format!(
            "bundle has p = {}, {} classes; model expects {}, {}",
            bundle.header.p, bundle.header.num_classes, model.config.input_dim, model.config.num_classes
        )));
    }
    let preds = predict_indices(model, bundle, &idx)?;
    let correct = idx
        .iter()
        .zip(&preds)
        .filter(|(&i, &p)| bundle.samples[i].hard_label() == p)
        .count();
    Ok(correct as f64 / idx.len() as f64)
}

/// Argmax predictions for the given sample indices.
pub fn predict_indices(model: &TrainedModel, bundle: &DatasetBundle, idx: &[usize]) -> Result<Vec<usize>, HarnessError> {
    let argmax_rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())).collect::<Vec<_>>();
    match bundle.header.task {
        TaskKind::Node => {
            let g = bundle.header.graph.as_ref().expect("node bundle has shared graph");
            let logits = model.classifier.predict(&model.params, &GraphBatch::new(&[g]))?;
            let all = argmax_rows(&logits);
            Ok(idx
                .iter()
                .map(|&i| all[bundle.samples[i].node().expect("node sample")])
                .collect())
        }
        TaskKind::Graph => {
            let mut out = Vec::with_capacity(idx.len());
            for chunk in idx.chunks(128) {
                let graphs = graphs_of(bundle, chunk);
                let logits = model.classifier.predict(&model.params, &GraphBatch::new(&graphs))?;
                out.extend(argmax_rows(&logits));
            }
            Ok(out)
        }
    }
}

struct SplitEval {
    idx: BTreeMap<Split, Vec<usize>>,
}

impl SplitEval {
    fn new(bundle: &DatasetBundle) -> Self {
        let idx = [Split::IdVal, Split::IdTest, Split::OodVal, Split::OodTest]
            .into_iter()
            .map(|s| (s, bundle.split_indices(s)))
            .collect();
        SplitEval { idx }
    }

    fn accuracies(&self, model: &TrainedModel, bundle: &DatasetBundle) -> Result<[f64; 4], HarnessError> {
        let mut out = [0.0; 4];
        for (k, split) in [Split::IdVal, Split::IdTest, Split::OodVal, Split::OodTest].into_iter().enumerate() {
            let idx = &self.idx[&split];
            if idx.is_empty() {
                return Err(HarnessError::EmptySplit(split.as_str().into()));
            }
            let preds = predict_indices(model, bundle, idx)?;
            let correct = idx
                .iter()
                .zip(&preds)
                .filter(|(&i, &p)| bundle.samples[i].hard_label() == p)
                .count();
            out[k] = correct as f64 / idx.len() as f64;
        }
        Ok(out)
    }
}

fn batch_objective(tape: &mut Tape, per_row: Var, envs: &[usize], gamma: f64, use_vrex: bool) -> Var {
    if use_vrex {
        vrex_on_tape(tape, per_row, envs, gamma)
    } else {
        tape.mean_all(per_row)
    }
}

/// Full training run on an in-memory bundle.
pub fn train(bundle: &DatasetBundle, cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(bundle);
    let (classifier, mut store) = build_model(&model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut featx = match cfg.method {
        Method::Featx => Some(FeatxTrainer::new(bundle, &cfg.featx, &mut store, cfg.seed)?),
        _ => None,
    };
    let train_idx = training_indices(bundle, cfg.method);
    if train_idx.is_empty() {
        return Err(HarnessError::EmptySplit("train".into()));
    }
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::new(cfg.lr)
    };
    let featx_lr = cfg.featx.mask_lr;
    let use_vrex = cfg.method == Method::GspliceR;
    let evals = SplitEval::new(bundle);
    let node_task = bundle.header.task == TaskKind::Node;
    let shared_graph = bundle.header.graph.as_ref();
    let shared_batch = shared_graph.map(|g| GraphBatch::new(&[g]));

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best_ood: Option<(f64, Vec<Array2<f64>>)> = None;
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        if let Some(fx) = featx.as_mut() {
            fx.begin_epoch(bundle, &order);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let t = Rc::new(targets(bundle, chunk));
            let envs: Vec<usize> = chunk
                .iter()
                .map(|&i| featx.as_ref().map_or(bundle.samples[i].env, |fx| fx.env_of(i, bundle.samples[i].env)))
                .collect();
            let mut tape = Tape::new();
            let (batch, x) = if node_task {
                let b = shared_batch.as_ref().unwrap();
                let x = match featx.as_ref() {
                    Some(fx) => fx.node_features_on_tape(&mut tape, &store, bundle, b),
                    None => tape.constant(b.x.clone()),
                };
                (None, x)
            } else {
                let graphs = graphs_of(bundle, chunk);
                let b = GraphBatch::new(&graphs);
                let x = match featx.as_ref() {
                    Some(fx) => fx.graph_features_on_tape(&mut tape, &store, bundle, chunk, &b),
                    None => tape.constant(b.x.clone()),
                };
                (Some(b), x)
            };
            let b = batch.as_ref().or(shared_batch.as_ref()).unwrap();
            let mut stats = Vec::new();
            let mut mode = Mode::Train {
                dropout: Some(&mut rng),
                stats: &mut stats,
            };
            let mut logits = classifier.logits(&mut tape, &store, b, x, &mut mode)?;
            if node_task {
                let sel = node_selector(bundle, chunk, b.num_nodes());
                logits = tape.spmm(sel, logits);
            }
            let per_row = tape.softmax_ce(logits, t);
            let loss = batch_objective(&mut tape, per_row, &envs, cfg.gamma, use_vrex);
            loss_sum += tape.scalar(loss) * chunk.len() as f64;
            tape.backward(loss, &mut store)?;
            match featx.as_mut() {
                Some(fx) => {
                    store.adam_step_where(&adam, |n| !fx.owns(n));
                    fx.step_mask_params(&mut store, featx_lr);
                }
                None => store.adam_step(&adam),
            }
            apply_batch_stats(&mut store, &stats);
        }
        let model = TrainedModel {
            config: model_cfg.clone(),
            classifier: classifier.clone(),
            params: store.clone(),
        };
        let [id_val, id_test, ood_val, ood_test] = evals.accuracies(&model, bundle)?;
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            id_val_acc: id_val,
            id_test_acc: id_test,
            ood_val_acc: ood_val,
            ood_test_acc: ood_test,
        });
        if best_ood.as_ref().is_none_or(|(b, _)| ood_val > *b) {
            best_ood = Some((ood_val, store.snapshot()));
        }
    }
    let (_, snap) = best_ood.expect("at least one epoch");
    store.restore(&snap);
    let featx_state = featx.as_ref().map(|fx| fx.state(&store));
    Ok(TrainOutcome {
        report: MetricReport::from_rows(cfg.method, cfg.seed, rows),
        model: TrainedModel {
            config: model_cfg,
            classifier,
            params: store,
        },
        featx: featx_state,
    })
}
