//! Minimal differentiable stack: tape autograd, parameters with Adam, and
//! GIN/GCN message passing.

mod gradcheck;
mod model;
mod params;
mod tape;

use thiserror::Error;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use model::{
    apply_batch_stats, BatchNorm, BatchStats, Classifier, GnnConfig, GnnEncoder, GnnKind, GraphBatch, Linear, Mode, Pooling,
    BN_MOMENTUM,
};
pub use params::{AdamConfig, ArrayRecord, ParamId, ParamStore, StoreRecord};
pub use tape::{log_softmax_rows, scalar_sigmoid, softplus, Sparse, Tape, Var};

use crate::dataset::validate_label;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called on a value not recorded on this tape")]
    UnrecordedForward,
    #[error("target is not a probability distribution: {0}")]
    NonDistributionTarget(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Soft-target cross-entropy `−Σ tᵢ log softmax(x)ᵢ` for one logit vector.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> Result<f64, NnError> {
    if logits.len() != target.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} logits vs {} target entries",
            logits.len(),
            target.len()
        )));
    }
    validate_label(target, target.len()).map_err(NnError::NonDistributionTarget)?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    Ok(logits
        .iter()
        .zip(target)
        .map(|(&x, &t)| if t > 0.0 { -t * (x - lse) } else { 0.0 })
        .sum())
}

