//! Run artifacts: `report.json`, `curves.csv` and `ckpt.bin`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{build_model, EpochRow, MetricReport, TrainedModel};
use super::HarnessError;
use crate::nn::{GnnConfig, ParamStore};

pub const CURVES_HEADER: [&str; 6] = ["epoch", "train_loss", "id_val_acc", "id_test_acc", "ood_val_acc", "ood_test_acc"];

pub fn write_report(report: &MetricReport, path: &Path) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

pub fn read_report(path: &Path) -> Result<MetricReport, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Writes one CSV row per epoch under the fixed header.
pub fn emit_curves(report: &MetricReport, path: &Path) -> Result<(), HarnessError> {
    let io = |e: csv::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io)?;
    w.write_record(CURVES_HEADER).map_err(io)?;
    for row in &report.rows {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}

pub fn read_curves(path: &Path) -> Result<Vec<EpochRow>, HarnessError> {
    let io = |e: csv::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let header: Vec<String> = r.headers().map_err(io)?.iter().map(String::from).collect();
    if header != CURVES_HEADER {
        return Err(HarnessError::Io(format!("unexpected curves header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(io)).collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: GnnConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    featx_mask: Option<Vec<bool>>,
}

pub fn save_model(model: &TrainedModel, featx_mask: Option<&[bool]>, path: &Path) -> Result<(), HarnessError> {
    let meta = serde_json::to_string(&CheckpointMeta {
        config: model.config.clone(),
        featx_mask: featx_mask.map(<[bool]>::to_vec),
    })
    .map_err(|e| HarnessError::Io(e.to_string()))?;
    let file = File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    model
        .params
        .write_binary(BufWriter::new(file), &meta)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Loads a classifier checkpoint; FeatX mask parameters stored alongside
/// the classifier are ignored.
pub fn load_model(path: &Path) -> Result<(TrainedModel, Option<Vec<bool>>), HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::MissingCheckpoint(format!("{}: {e}", path.display())))?;
    let (stored, meta) = ParamStore::read_binary(BufReader::new(file))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta).map_err(|e| HarnessError::Io(format!("checkpoint metadata: {e}")))?;
    let (classifier, mut params) = build_model(&meta.config, 0)?;
    params.load_values(&stored)?;
    Ok((
        TrainedModel {
            config: meta.config,
            classifier,
            params,
        },
        meta.featx_mask,
    ))
}
