//! Named parameter arrays with gradient buffers, Adam state and
//! checkpoint serialization.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Array2<f64>,
    grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
    /// Adam steps applied to this entry.
    t: u64,
    /// Excluded from `adam_step` when frozen.
    frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        let shape = value.dim();
        self.entries.push(Entry {
            name: name.clone(),
            value,
            grad: Array2::zeros(shape),
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
            frozen: false,
        });
        self.index.insert(name, id);
        id
    }

    /// Glorot-uniform `rows × cols` weight.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound));
        self.add(name, w)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].grad
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.entries[id.0].value[[0, 0]]
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Array2<f64>) {
        self.entries[id.0].grad += g;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// One Adam update with bias correction over all unfrozen parameters,
    /// then clears every gradient buffer.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.adam_step_where(cfg, |_| true);
        self.zero_grad();
    }

    /// Adam update restricted to parameters accepted by `select`. Bias
    /// correction uses each entry's own step count. Clears only the
    /// gradients of updated entries.
    pub fn adam_step_where(&mut self, cfg: &AdamConfig, select: impl Fn(&str) -> bool) {
        self.step += 1;
        for e in &mut self.entries {
            if e.frozen || !select(&e.name) {
                continue;
            }
            e.t += 1;
            let t = e.t as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            if cfg.weight_decay != 0.0 {
                e.grad.scaled_add(cfg.weight_decay, &e.value);
            }
            ndarray::Zip::from(&mut e.value)
                .and(&mut e.m)
                .and(&mut e.v)
                .and(&e.grad)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                });
            e.grad.fill(0.0);
        }
    }

    /// Values only, in insertion order.
    pub fn snapshot(&self) -> Vec<Array2<f64>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Array2<f64>]) {
        assert_eq!(values.len(), self.entries.len(), "snapshot size mismatch");
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value.assign(v);
        }
    }

    pub fn to_record(&self) -> StoreRecord {
        StoreRecord {
            arrays: self
                .entries
                .iter()
                .map(|e| ArrayRecord {
                    name: e.name.clone(),
                    rows: e.value.nrows(),
                    cols: e.value.ncols(),
                    data: e.value.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &StoreRecord) -> Result<Self, NnError> {
        let mut s = ParamStore::new();
        for a in &rec.arrays {
            let v = Array2::from_shape_vec((a.rows, a.cols), a.data.clone())
                .map_err(|e| NnError::Checkpoint(format!("array {}: {e}", a.name)))?;
            s.add(a.name.clone(), v);
        }
        Ok(s)
    }

    /// Copy values from `other` for every name present in both stores with
    /// matching shape.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), NnError> {
        for e in &mut self.entries {
            let id = other
                .get(&e.name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing array {}", e.name)))?;
            let v = other.value(id);
            if v.dim() != e.value.dim() {
                return Err(NnError::ShapeMismatch(format!(
                    "array {}: checkpoint {:?} vs model {:?}",
                    e.name,
                    v.dim(),
                    e.value.dim()
                )));
            }
            e.value.assign(v);
        }
        Ok(())
    }

    /// Binary checkpoint: magic, metadata JSON, then named little-endian
    /// `f64` arrays.
    pub fn write_binary<W: Write>(&self, mut w: W, metadata: &str) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        write_u64(&mut w, metadata.len() as u64)?;
        w.write_all(metadata.as_bytes())?;
        write_u64(&mut w, self.entries.len() as u64)?;
        for e in &self.entries {
            write_u64(&mut w, e.name.len() as u64)?;
            w.write_all(e.name.as_bytes())?;
            write_u64(&mut w, e.value.nrows() as u64)?;
            write_u64(&mut w, e.value.ncols() as u64)?;
            for x in e.value.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<(ParamStore, String), NnError> {
        let bad = |m: &str| NnError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a parameter checkpoint"));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
        let meta = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;
        let count = read_u64(&mut r)? as usize;
        let mut s = ParamStore::new();
        for _ in 0..count {
            let len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf).map_err(|_| bad("truncated array"))?;
                data.push(f64::from_le_bytes(buf));
            }
            let v = Array2::from_shape_vec((rows, cols), data).map_err(|e| NnError::Checkpoint(e.to_string()))?;
            s.add(name, v);
        }
        Ok((s, meta))
    }
}

const MAGIC: &[u8; 8] = b"XTRPPRM1";

fn write_u64<W: Write>(w: &mut W, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| NnError::Checkpoint("truncated checkpoint".into()))?;
    Ok(u64::from_le_bytes(buf))
}

/// JSON-friendly form of a store's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub arrays: Vec<ArrayRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}
