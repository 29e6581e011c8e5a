//! Versioned model checkpoints: a `DGPMPC1` magic line followed by a JSON
//! document holding layer shapes, kernel hyperparameters, inducing inputs,
//! noise precision, normalization statistics, and the posterior-sample
//! window with the live chain state.

use crate::dgp::{DgpModel, GpLayer, PosteriorSample};
use crate::error::{Error, Result};
use crate::inference::{PosteriorReservoir, SghmcConfig};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &str = "DGPMPC1";

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    state_dim: usize,
    action_dim: usize,
    noise_precision: f64,
    normalizer: crate::data::Normalizer,
    layers: Vec<GpLayer>,
    samples: Vec<PosteriorSample>,
    chain_position: Array1<f64>,
    chain_momentum: Array1<f64>,
}

/// Writes the model and posterior window to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &DgpModel,
    reservoir: &PosteriorReservoir,
) -> Result<()> {
    let doc = CheckpointDoc {
        state_dim: model.state_dim(),
        action_dim: model.action_dim(),
        noise_precision: model.noise_precision(),
        normalizer: model.normalizer.clone(),
        layers: model.layers().to_vec(),
        samples: reservoir.samples().cloned().collect(),
        chain_position: reservoir.chain_position().clone(),
        chain_momentum: reservoir.chain_momentum().clone(),
    };
    let body = serde_json::to_string(&doc)
        .map_err(|e| Error::InvalidState(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, format!("{MAGIC}\n{body}\n")).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, re-validating every model invariant.
pub fn load_checkpoint(
    path: &Path,
    sghmc: &SghmcConfig,
) -> Result<(DgpModel, PosteriorReservoir)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (header, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::Config(format!("{}: missing checkpoint header", path.display())))?;
    if header.trim() != MAGIC {
        return Err(Error::Config(format!(
            "{}: bad magic '{}' (expected {MAGIC})",
            path.display(),
            header.trim()
        )));
    }
    let doc: CheckpointDoc = serde_json::from_str(body)
        .map_err(|e| Error::Config(format!("{}: invalid checkpoint body: {e}", path.display())))?;
    let model = DgpModel::new(
        doc.layers,
        doc.noise_precision,
        doc.state_dim,
        doc.action_dim,
        doc.normalizer,
    )?;
    let reservoir = PosteriorReservoir::restore(
        &model,
        sghmc,
        doc.samples,
        doc.chain_position,
        doc.chain_momentum,
    )?;
    Ok((model, reservoir))
}
