//! Central finite-difference comparison against tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Worst entry found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Relative error with a small floor so that both-near-zero pairs compare
/// by absolute difference.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares the tape gradient of `loss_fn` with central differences of
/// step `h` for every entry of every parameter in `ids`.
pub fn check_gradients<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, loss_fn: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    tape.backward(loss, store).expect("loss recorded on tape");
    let analytic: Vec<_> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    store.zero_grad();

    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, store);
        t.scalar(l)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for (k, &id) in ids.iter().enumerate() {
        let (rows, cols) = store.value(id).dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = store.value(id)[[i, j]];
                store.value_mut(id)[[i, j]] = orig + h;
                let up = eval(store);
                store.value_mut(id)[[i, j]] = orig - h;
                let down = eval(store);
                store.value_mut(id)[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[k][[i, j]];
                let err = relative_error(a, numeric);
                report.entries_checked += 1;
                if err > report.max_rel_error || report.worst_param.is_empty() {
                    report.max_rel_error = err.max(report.max_rel_error);
                    report.worst_param = store.name(id).to_string();
                    report.worst_index = (i, j);
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    report
}
