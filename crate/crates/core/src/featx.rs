//! Feature extrapolation: variance-scored invariance masks and masked
//! linear extrapolation wrapped into the feature domain.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetBundle, LabeledSample, Split, Subject, TaskKind};
use crate::nn::{scalar_sigmoid, GraphBatch, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum FeatxError {
    #[error("degenerate groups: {0}")]
    DegenerateGroups(String),
    #[error("paired samples have different labels")]
    LabelMismatch,
    #[error("paired samples share an environment")]
    SameEnvironment,
    #[error("no same-label cross-environment pairs in the training split")]
    NoValidPairs,
    #[error("invalid FeatX configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatxConfig {
    /// Gamma shape.
    pub a: f64,
    /// Gamma scale.
    pub b: f64,
    /// Temperature of the relaxed mask.
    pub tau: f64,
    /// Fraction of each epoch's training samples given extrapolated features.
    pub pct: f64,
    /// Adam step size for k1, k2 and T.
    pub mask_lr: f64,
    pub k1: f64,
    pub k2: f64,
    pub threshold: f64,
}

impl Default for FeatxConfig {
    fn default() -> Self {
        FeatxConfig {
            a: 2.0,
            b: 1.0,
            tau: 0.1,
            pct: 0.8,
            mask_lr: 1e-4,
            k1: 1.0,
            k2: 1.0,
            threshold: 0.0,
        }
    }
}

impl FeatxConfig {
    pub fn validate(&self) -> Result<(), FeatxError> {
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(FeatxError::Config("gamma shape and scale must be positive".into()));
        }
        if !(self.tau > 0.0) || !(0.0..=1.0).contains(&self.pct) {
            return Err(FeatxError::Config("tau must be positive and pct in [0, 1]".into()));
        }
        if !(self.k1 >= 0.0 && self.k2 >= 0.0) {
            return Err(FeatxError::Config("k1 and k2 must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Population variance of each column over `rows`.
fn column_variance(rows: &[Array1<f64>]) -> Array1<f64> {
    let n = rows.len() as f64;
    let p = rows[0].len();
    let mut mean = Array1::zeros(p);
    for r in rows {
        mean += r;
    }
    mean /= n;
    let mut var = Array1::zeros(p);
    for r in rows {
        let d = r - &mean;
        var += &(&d * &d);
    }
    var / n
}

/// Mean within-label and mean within-environment feature variances of the
/// training split. Graph-level groups pool all node rows of their graphs.
pub fn variance_components(bundle: &DatasetBundle) -> Result<(Array1<f64>, Array1<f64>), FeatxError> {
    let mut by_label: BTreeMap<usize, Vec<Array1<f64>>> = BTreeMap::new();
    let mut by_env: BTreeMap<usize, Vec<Array1<f64>>> = BTreeMap::new();
    for (_, s) in bundle.split(Split::Train) {
        let (graph, rows): (_, Vec<usize>) = match s.subject {
            Subject::Graph(ref g) => (g, (0..g.num_nodes()).collect()),
            Subject::Node(v) => (bundle.header.graph.as_ref().expect("shared graph"), vec![v]),
        };
        for v in rows {
            let row = graph.node_features().row(v).to_owned();
            by_label.entry(s.hard_label()).or_default().push(row.clone());
            by_env.entry(s.env).or_default().push(row);
        }
    }
    if by_label.len() < 2 || by_env.len() < 2 {
        return Err(FeatxError::DegenerateGroups(format!(
            "need at least 2 labels and 2 environments, found {} and {}",
            by_label.len(),
            by_env.len()
        )));
    }
    let mean_var = |groups: &BTreeMap<usize, Vec<Array1<f64>>>, what: &str| {
        let mut acc = Array1::zeros(bundle.header.p);
        for (k, rows) in groups {
            if rows.len() < 2 {
                return Err(FeatxError::DegenerateGroups(format!("{what} {k} has {} rows", rows.len())));
            }
            acc += &column_variance(rows);
        }
        Ok(acc / groups.len() as f64)
    };
    Ok((mean_var(&by_label, "label")?, mean_var(&by_env, "environment")?))
}

/// Per-feature score: `k1 · (within-label variance) − k2 · (within-env variance)`.
pub fn variance_scores(bundle: &DatasetBundle, k1: f64, k2: f64) -> Result<Vec<f64>, FeatxError> {
    let (label_var, env_var) = variance_components(bundle)?;
    Ok(label_var
        .iter()
        .zip(env_var.iter())
        .map(|(l, e)| k1 * l - k2 * e)
        .collect())
}

pub fn hard_mask(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

pub fn soft_mask(scores: &[f64], threshold: f64, tau: f64) -> Vec<f64> {
    scores.iter().map(|&s| scalar_sigmoid((s - threshold) / tau)).collect()
}

/// Wraps `x` into `[lo, hi)` by adding a whole number of range lengths.
pub fn wrap_into(x: f64, lo: f64, hi: f64) -> f64 {
    if (lo..hi).contains(&x) {
        return x;
    }
    let len = hi - lo;
    let mut y = x - ((x - lo) / len).floor() * len;
    // Rounding can land exactly on `hi` or just below `lo`.
    if y >= hi {
        y -= len;
    }
    if y < lo {
        y = lo;
    }
    y
}

pub fn generalized_modulo(x: &[f64], domain: &[(f64, f64)]) -> Vec<f64> {
    x.iter().zip(domain).map(|(&v, &(lo, hi))| wrap_into(v, lo, hi)).collect()
}

pub fn sample_lambda<R: Rng>(a: f64, b: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(a, b).expect("positive gamma parameters");
    loop {
        let x = g.sample(rng);
        if x > 0.0 {
            return x;
        }
    }
}

/// Extrapolated feature row: masked entries become
/// `((1 + λ) x1 − λ′ x2) mod 𝒟`, the rest stay `x1`.
pub fn extrapolate_row(x1: &[f64], x2: &[f64], mask: &[bool], lambda: f64, lambda2: f64, domain: &[(f64, f64)]) -> Vec<f64> {
    x1.iter()
        .zip(x2)
        .zip(mask)
        .zip(domain)
        .map(|(((&a, &b), &m), &(lo, hi))| {
            if m {
                wrap_into((1.0 + lambda) * a - lambda2 * b, lo, hi)
            } else {
                a
            }
        })
        .collect()
}

/// Partner features for a pair: a single row broadcast to every node of
/// the first sample (graph level) or the paired node's row (node level).
pub fn featx_augment(
    sample1: &LabeledSample,
    x1: &Array2<f64>,
    sample2: &LabeledSample,
    x2: &[f64],
    mask: &[bool],
    lambda: f64,
    lambda2: f64,
    domain: &[(f64, f64)],
    featx_env: usize,
) -> Result<(LabeledSample, Array2<f64>), FeatxError> {
    if sample1.hard_label() != sample2.hard_label() {
        return Err(FeatxError::LabelMismatch);
    }
    if sample1.env == sample2.env {
        return Err(FeatxError::SameEnvironment);
    }
    let mut out = x1.clone();
    for mut row in out.rows_mut() {
        let r = extrapolate_row(row.as_slice().unwrap(), x2, mask, lambda, lambda2, domain);
        row.iter_mut().zip(r).for_each(|(d, s)| *d = s);
    }
    let subject = match &sample1.subject {
        Subject::Graph(g) => Subject::Graph(g.with_node_features(out.clone()).expect("row count preserved")),
        Subject::Node(v) => Subject::Node(*v),
    };
    Ok((
        LabeledSample {
            subject,
            label: sample1.label.clone(),
            env: featx_env,
            split: sample1.split,
            meta: sample1.meta.clone(),
        },
        out,
    ))
}

/// Same-label, different-environment partner candidates per training sample.
pub fn partner_table(bundle: &DatasetBundle, idx: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut table = BTreeMap::new();
    for &i in idx {
        let si = &bundle.samples[i];
        let partners: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&j| {
                let sj = &bundle.samples[j];
                sj.hard_label() == si.hard_label() && sj.env != si.env
            })
            .collect();
        if !partners.is_empty() {
            table.insert(i, partners);
        }
    }
    table
}

/// Learned mask parameters and the hard mask they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub k1: f64,
    pub k2: f64,
    pub threshold: f64,
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
}

/// One extrapolation draw for a training sample in the current epoch.
#[derive(Debug, Clone)]
struct Draw {
    partner_row: Vec<f64>,
    lambda: f64,
}

/// FeatX state inside a training run: the mask parameters, partner tables
/// and the current epoch's draws.
pub struct FeatxTrainer {
    cfg: FeatxConfig,
    domain: Vec<(f64, f64)>,
    label_var: Array1<f64>,
    env_var: Array1<f64>,
    k1: ParamId,
    k2: ParamId,
    threshold: ParamId,
    partners: BTreeMap<usize, Vec<usize>>,
    draws: BTreeMap<usize, Draw>,
    featx_env: usize,
    rng: ChaCha8Rng,
}

const PARAM_PREFIX: &str = "featx.";

impl FeatxTrainer {
    pub fn new(bundle: &DatasetBundle, cfg: &FeatxConfig, store: &mut ParamStore, seed: u64) -> Result<Self, FeatxError> {
        cfg.validate()?;
        let (label_var, env_var) = variance_components(bundle)?;
        let train = bundle.split_indices(Split::Train);
        let partners = partner_table(bundle, &train);
        if partners.is_empty() {
            return Err(FeatxError::NoValidPairs);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(FeatxTrainer {
            cfg: cfg.clone(),
            domain: bundle.header.domain.clone(),
            label_var,
            env_var,
            k1: store.add(format!("{PARAM_PREFIX}k1"), Array2::from_elem((1, 1), cfg.k1)),
            k2: store.add(format!("{PARAM_PREFIX}k2"), Array2::from_elem((1, 1), cfg.k2)),
            threshold: store.add(format!("{PARAM_PREFIX}threshold"), Array2::from_elem((1, 1), cfg.threshold)),
            partners,
            draws: BTreeMap::new(),
            featx_env: bundle.next_env_id(),
            rng,
        })
    }

    pub fn featx_env(&self) -> usize {
        self.featx_env
    }

    pub fn owns(&self, name: &str) -> bool {
        name.starts_with(PARAM_PREFIX)
    }

    pub fn scores(&self, store: &ParamStore) -> Vec<f64> {
        let (k1, k2) = (store.scalar(self.k1), store.scalar(self.k2));
        self.label_var
            .iter()
            .zip(self.env_var.iter())
            .map(|(l, e)| k1 * l - k2 * e)
            .collect()
    }

    pub fn hard_mask(&self, store: &ParamStore) -> Vec<bool> {
        hard_mask(&self.scores(store), store.scalar(self.threshold))
    }

    pub fn state(&self, store: &ParamStore) -> MaskState {
        MaskState {
            k1: store.scalar(self.k1),
            k2: store.scalar(self.k2),
            threshold: store.scalar(self.threshold),
            scores: self.scores(store),
            mask: self.hard_mask(store),
        }
    }

    /// Picks the samples to extrapolate this epoch (a `pct` fraction of
    /// `order` among those with partners), their partners and weights.
    pub fn begin_epoch(&mut self, bundle: &DatasetBundle, order: &[usize]) {
        self.draws.clear();
        let quota = (self.cfg.pct * order.len() as f64).round() as usize;
        let graph_level = bundle.header.task == TaskKind::Graph;
        for &i in order.iter().filter(|i| self.partners.contains_key(i)).take(quota) {
            let cands = &self.partners[&i];
            let j = cands[self.rng.random_range(0..cands.len())];
            let sj = &bundle.samples[j];
            let partner_row = if graph_level {
                let g = bundle.graph_of(sj);
                g.node_features().row(self.rng.random_range(0..g.num_nodes())).to_vec()
            } else {
                let g = bundle.graph_of(sj);
                g.node_features().row(sj.node().expect("node sample")).to_vec()
            };
            let lambda = sample_lambda(self.cfg.a, self.cfg.b, &mut self.rng);
            self.draws.insert(i, Draw { partner_row, lambda });
        }
    }

    pub fn env_of(&self, idx: usize, original: usize) -> usize {
        if self.draws.contains_key(&idx) {
            self.featx_env
        } else {
            original
        }
    }

    fn soft_mask_var(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let p = self.label_var.len();
        let lv = tape.constant(self.label_var.clone().insert_axis(ndarray::Axis(0)));
        let ev = tape.constant(self.env_var.clone().insert_axis(ndarray::Axis(0)));
        let ones = tape.constant(Array2::ones((1, p)));
        let k1 = tape.param(store, self.k1);
        let k2 = tape.param(store, self.k2);
        let t = tape.param(store, self.threshold);
        let a = tape.mul_scalar(lv, k1);
        let b = tape.mul_scalar(ev, k2);
        let s = tape.sub(a, b);
        let tt = tape.mul_scalar(ones, t);
        let pre = tape.sub(s, tt);
        let scaled = tape.scale(pre, 1.0 / self.cfg.tau);
        tape.sigmoid(scaled)
    }

    fn blend(&self, tape: &mut Tape, store: &ParamStore, base: Array2<f64>, ext: Array2<f64>) -> Var {
        let soft = self.soft_mask_var(tape, store);
        let hard = self.hard_mask(store);
        tape.mask_blend(Rc::new(base), Rc::new(ext), soft, &hard)
    }

    /// Batch features with extrapolated rows for this epoch's drawn graphs.
    pub fn graph_features_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        _bundle: &DatasetBundle,
        chunk: &[usize],
        batch: &GraphBatch,
    ) -> Var {
        let all = vec![true; self.domain.len()];
        let mut ext = batch.x.clone();
        for (k, &i) in chunk.iter().enumerate() {
            let Some(d) = self.draws.get(&i) else { continue };
            for v in batch.offsets[k]..batch.offsets[k + 1] {
                let r = extrapolate_row(batch.x.row(v).as_slice().unwrap(), &d.partner_row, &all, d.lambda, d.lambda, &self.domain);
                ext.row_mut(v).iter_mut().zip(r).for_each(|(o, s)| *o = s);
            }
        }
        self.blend(tape, store, batch.x.clone(), ext)
    }

    /// Shared-graph features with extrapolated rows for drawn nodes.
    pub fn node_features_on_tape(&self, tape: &mut Tape, store: &ParamStore, bundle: &DatasetBundle, batch: &GraphBatch) -> Var {
        let all = vec![true; self.domain.len()];
        let mut ext = batch.x.clone();
        for (&i, d) in &self.draws {
            let v = bundle.samples[i].node().expect("node sample");
            let r = extrapolate_row(batch.x.row(v).as_slice().unwrap(), &d.partner_row, &all, d.lambda, d.lambda, &self.domain);
            ext.row_mut(v).iter_mut().zip(r).for_each(|(o, s)| *o = s);
        }
        self.blend(tape, store, batch.x.clone(), ext)
    }

    /// Adam step on k1, k2 and T with their own step size; k1, k2 are
    /// projected back to nonnegative values.
    pub fn step_mask_params(&mut self, store: &mut ParamStore, lr: f64) {
        let cfg = crate::nn::AdamConfig::new(lr);
        store.adam_step_where(&cfg, |n| n.starts_with(PARAM_PREFIX));
        for id in [self.k1, self.k2] {
            let v = store.value_mut(id);
            v[[0, 0]] = v[[0, 0]].max(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_examples() {
        assert!((wrap_into(1.3, 0.0, 1.0) - 0.3).abs() < 1e-9);
        assert_eq!(wrap_into(0.5, 0.0, 1.0), 0.5);
        assert!((wrap_into(-1.5, -1.0, 1.0) - 0.5).abs() < 1e-12);
        assert_eq!(wrap_into(1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn extrapolate_hand_case() {
        let r = extrapolate_row(&[0.8], &[0.2], &[true], 1.0, 1.0, &[(0.0, 1.0)]);
        assert!((r[0] - 0.4).abs() < 1e-12);
    }
}
