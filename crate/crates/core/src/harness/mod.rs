//! Experiment orchestration: training runs, evaluation, reports and the
//! verification suites.

mod io;
mod train;
pub mod verify;

use thiserror::Error;

pub use verify::{verify, Check, Suite, SuiteReport, VerifyOptions};
pub use io::{emit_curves, load_model, read_curves, read_report, save_model, write_report, CURVES_HEADER};
pub use train::{
    build_model, evaluate, predict_indices, train, training_indices, EpochRow, Method, MetricReport, RunConfig,
    TrainOutcome, TrainedModel,
};

use crate::featx::FeatxError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("split {0} is empty")]
    EmptySplit(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io: {0}")]
    Io(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Featx(#[from] FeatxError),
}
