//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every value is an `Array2<f64>`; scalars are `1 × 1`. A `Tape` records
//! operations as they are evaluated, and `backward` walks it in reverse,
//! accumulating parameter gradients into a `ParamStore`.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use super::NnError;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse `rows × cols` matrix stored as `(row, col, weight)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparse {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Sparse {
    pub fn new(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        debug_assert!(entries.iter().all(|&(r, c, _)| r < rows && c < cols));
        Sparse { rows, cols, entries }
    }

    /// `self · a`.
    pub fn apply(&self, a: &Array2<f64>) -> Array2<f64> {
        assert_eq!(a.nrows(), self.cols, "sparse product shape mismatch");
        let mut out = Array2::zeros((self.rows, a.ncols()));
        for &(r, c, w) in &self.entries {
            out.row_mut(r).scaled_add(w, &a.row(c));
        }
        out
    }

    /// `selfᵀ · g`.
    pub fn apply_transpose(&self, g: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for &(r, c, w) in &self.entries {
            out.row_mut(c).scaled_add(w, &g.row(r));
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    MulRows(Var, Var),
    MulRow(Var, Var),
    /// Column standardization with batch statistics; keeps `1/std`.
    BatchNorm(Var, Vec<f64>),
    DivRows(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    SpMM(Rc<Sparse>, Var),
    SumAll(Var),
    MeanAll(Var),
    RowMax(Var, Vec<usize>),
    RowNormalize(Var, f64),
    SoftmaxCe(Var, Rc<Array2<f64>>),
    BceWithLogits(Var, Rc<Array2<f64>>),
    /// Forward selects `ext` where the hard mask is set; backward passes the
    /// gradient straight through to the soft column mask.
    MaskBlend {
        soft: Var,
        base: Rc<Array2<f64>>,
        ext: Rc<Array2<f64>>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn scalar_sigmoid(x: f64) -> f64 {
    sigmoid(x)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Adds a `1 × d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "bias must be a single row");
        let v = self.value(a) + r;
        self.push(v, Op::AddRow(a, row))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Multiplies `a` by the `1 × 1` value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::MulScalar(a, s))
    }

    /// Multiplies row `i` of `a` by `r[i, 0]`.
    pub fn mul_rows(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.value(r).dim(), (self.value(a).nrows(), 1), "row scale shape mismatch");
        let v = self.value(a) * self.value(r);
        self.push(v, Op::MulRows(a, r))
    }

    /// Multiplies every row of `a` elementwise by the `1 × d` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.value(r).dim(), (1, self.value(a).ncols()), "row multiplier shape mismatch");
        let v = self.value(a) * self.value(r);
        self.push(v, Op::MulRow(a, r))
    }

    /// Standardizes each column with its batch mean and population
    /// variance: `(a − μ) / sqrt(σ² + eps)`. Returns the output together
    /// with the batch mean and variance.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let x = self.value(a);
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
        let mut var = Array2::zeros((1, x.ncols()));
        for row in x.rows() {
            let d = &row - &mean;
            var.row_mut(0).zip_mut_with(&d, |v, &d| *v += d * d);
        }
        var /= n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, o) in row.iter_mut().enumerate() {
                *o = (*o - mean[j]) * inv_std[j];
            }
        }
        let m = mean.to_vec();
        let v = var.iter().copied().collect();
        (self.push(out, Op::BatchNorm(a, inv_std)), m, v)
    }

    /// Divides row `i` of `a` by `d[i, 0]`.
    pub fn div_rows(&mut self, a: Var, d: Var) -> Var {
        assert_eq!(self.value(d).dim(), (self.value(a).nrows(), 1), "row divisor shape mismatch");
        let v = self.value(a) / self.value(d);
        self.push(v, Op::DivRows(a, d))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Sparse-dense product `s · a` (neighbor aggregation, pooling, gathers).
    pub fn spmm(&mut self, s: Rc<Sparse>, a: Var) -> Var {
        let v = s.apply(self.value(a));
        self.push(v, Op::SpMM(s, a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len().max(1) as f64);
        self.push(v, Op::MeanAll(a))
    }

    /// Per-row maximum as an `n × 1` column; gradient flows to the first
    /// maximizing entry.
    pub fn row_max(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = Vec::with_capacity(x.nrows());
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut best = 0;
            for (j, &y) in row.iter().enumerate() {
                if y > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            v[[i, 0]] = row[best];
        }
        self.push(v, Op::RowMax(a, arg))
    }

    /// Scales each row to `a_i / (‖a_i‖ + eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / (n + eps));
        }
        self.push(v, Op::RowNormalize(a, eps))
    }

    /// Per-row soft-target cross-entropy `−Σ_c t_c log softmax(x)_c`, as an
    /// `n × 1` column.
    pub fn softmax_ce(&mut self, logits: Var, targets: Rc<Array2<f64>>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim(), "cross-entropy target shape mismatch");
        let ls = log_softmax_rows(x);
        let per_row = (&ls * targets.as_ref()).sum_axis(Axis(1)).mapv(|v| -v);
        let v = per_row.insert_axis(Axis(1));
        self.push(v, Op::SoftmaxCe(logits, targets))
    }

    /// Elementwise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Array2<f64>>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim(), "bce target shape mismatch");
        let mut v = x.clone();
        Zip::from(&mut v)
            .and(targets.as_ref())
            .for_each(|o, &t| *o = softplus(*o) - t * *o);
        self.push(v, Op::BceWithLogits(logits, targets))
    }

    /// `base` where `hard[j]` is false, `ext` where it is true, column-wise.
    /// `soft` is a `1 × p` mask receiving the straight-through gradient.
    pub fn mask_blend(&mut self, base: Rc<Array2<f64>>, ext: Rc<Array2<f64>>, soft: Var, hard: &[bool]) -> Var {
        assert_eq!(base.dim(), ext.dim(), "mask blend shape mismatch");
        assert_eq!(self.value(soft).dim(), (1, base.ncols()), "mask width mismatch");
        let mut v = base.as_ref().clone();
        for (j, &h) in hard.iter().enumerate() {
            if h {
                v.column_mut(j).assign(&ext.column(j));
            }
        }
        self.push(v, Op::MaskBlend { soft, base, ext })
    }

    /// Reverse pass from a `1 × 1` loss. Parameter gradients are added to
    /// the store's buffers.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::UnrecordedForward);
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(NnError::ShapeMismatch(format!(
                "loss must be 1 x 1, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(x) => *x += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::MulScalar(a, s) => {
                    let k = self.scalar(*s);
                    let ds = (&g * self.value(*a)).sum();
                    acc(*s, Array2::from_elem((1, 1), ds));
                    acc(*a, g * k);
                }
                Op::MulRows(a, r) => {
                    let dr = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let da = &g * self.value(*r);
                    acc(*r, dr);
                    acc(*a, da);
                }
                Op::MulRow(a, r) => {
                    let dr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let da = &g * self.value(*r);
                    acc(*r, dr);
                    acc(*a, da);
                }
                Op::BatchNorm(a, inv_std) => {
                    let xhat = &node.value;
                    let n = xhat.nrows() as f64;
                    let gsum = g.sum_axis(Axis(0));
                    let gx = (&g * xhat).sum_axis(Axis(0));
                    let mut d = g.clone();
                    for (mut drow, xrow) in d.rows_mut().into_iter().zip(xhat.rows()) {
                        for j in 0..drow.len() {
                            drow[j] = inv_std[j] * (drow[j] - gsum[j] / n - xrow[j] * gx[j] / n);
                        }
                    }
                    acc(*a, d);
                }
                Op::DivRows(a, d) => {
                    let dv = self.value(*d);
                    let out = &node.value;
                    let dd = -(&g * out).sum_axis(Axis(1)).insert_axis(Axis(1)) / dv;
                    acc(*d, dd);
                    acc(*a, g / dv);
                }
                Op::Scale(a, k) => acc(*a, g * *k),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &s| *d *= s * (1.0 - s));
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, g * &node.value),
                Op::SpMM(s, a) => acc(*a, s.apply_transpose(&g)),
                Op::SumAll(a) => {
                    let k = g[[0, 0]];
                    acc(*a, Array2::from_elem(self.value(*a).dim(), k));
                }
                Op::MeanAll(a) => {
                    let dim = self.value(*a).dim();
                    let k = g[[0, 0]] / (dim.0 * dim.1).max(1) as f64;
                    acc(*a, Array2::from_elem(dim, k));
                }
                Op::RowMax(a, arg) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (i, &j) in arg.iter().enumerate() {
                        d[[i, j]] = g[[i, 0]];
                    }
                    acc(*a, d);
                }
                Op::RowNormalize(a, eps) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (mut drow, xrow) in d.rows_mut().into_iter().zip(x.rows()) {
                        let r = xrow.dot(&xrow).sqrt();
                        let s = r + eps;
                        let proj = if r > 0.0 { xrow.dot(&drow) / (r * s * s) } else { 0.0 };
                        drow.mapv_inplace(|v| v / s);
                        drow.scaled_add(-proj, &xrow);
                    }
                    acc(*a, d);
                }
                Op::SoftmaxCe(a, t) => {
                    let mut p = log_softmax_rows(self.value(*a)).mapv(f64::exp);
                    for ((mut prow, trow), gi) in p.rows_mut().into_iter().zip(t.rows()).zip(g.column(0)) {
                        let tsum: f64 = trow.sum();
                        Zip::from(&mut prow).and(&trow).for_each(|p, &t| *p = gi * (*p * tsum - t));
                    }
                    acc(*a, p);
                }
                Op::BceWithLogits(a, t) => {
                    let mut d = self.value(*a).mapv(sigmoid);
                    Zip::from(&mut d)
                        .and(t.as_ref())
                        .and(&g)
                        .for_each(|d, &t, &g| *d = g * (*d - t));
                    acc(*a, d);
                }
                Op::MaskBlend { soft, base, ext } => {
                    let diff = ext.as_ref() - base.as_ref();
                    let d = (&g * &diff).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*soft, d);
                }
            }
        }
        Ok(())
    }
}
