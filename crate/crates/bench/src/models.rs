//! Trained models and their checkpoints.

use std::path::Path;

use cama_core::baseline::{Classifier, MlpClassifierSpec};
use cama_core::cama::{CamaModel, CamaSpec};
use cama_core::ndgrad::{ensure_compatible, load_checkpoint, save_checkpoint, GradError, ParameterStore};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { found: String, expected: String },
    #[error("round trip changed group {0:?}")]
    NotBitIdentical(String),
    #[error("cannot build model: {0}")]
    Build(String),
}

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Cama(CamaModel),
    Dnn(Classifier),
}

impl TrainedModel {
    pub fn kind_label(&self) -> &'static str {
        match self {
            TrainedModel::Cama(_) => "cama",
            TrainedModel::Dnn(_) => "dnn",
        }
    }

    pub fn params(&self) -> &ParameterStore {
        match self {
            TrainedModel::Cama(m) => &m.params,
            TrainedModel::Dnn(c) => &c.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParameterStore {
        match self {
            TrainedModel::Cama(m) => &mut m.params,
            TrainedModel::Dnn(c) => &mut c.params,
        }
    }

    fn spec_json(&self) -> serde_json::Value {
        match self {
            TrainedModel::Cama(m) => json!(m.spec),
            TrainedModel::Dnn(c) => json!(c.spec),
        }
    }

    /// A zero-valued model of the same architecture as `self`.
    fn blank_like(&self) -> Result<Self, CheckpointError> {
        blank(self.kind_label(), &self.spec_json())
    }
}

fn blank(kind: &str, spec: &serde_json::Value) -> Result<TrainedModel, CheckpointError> {
    let bad = |e: &dyn std::fmt::Display| CheckpointError::Build(e.to_string());
    match kind {
        "cama" => {
            let spec: CamaSpec = serde_json::from_value(spec.clone()).map_err(|e| bad(&e))?;
            Ok(TrainedModel::Cama(CamaModel::zeroed(spec).map_err(|e| bad(&e))?))
        }
        "dnn" => {
            let spec: MlpClassifierSpec = serde_json::from_value(spec.clone()).map_err(|e| bad(&e))?;
            Ok(TrainedModel::Dnn(Classifier::zeroed(spec).map_err(|e| bad(&e))?))
        }
        other => Err(CheckpointError::Build(format!("unknown model kind {other:?}"))),
    }
}

/// Writes the parameters with the architecture in the metadata.
pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let meta = json!({ "kind": model.kind_label(), "spec": model.spec_json() });
    Ok(save_checkpoint(path, model.params(), &meta)?)
}

/// Loads a checkpoint into a model shaped like `expected`. Any disagreement
/// in entry names, groups or shapes is an error naming the first offending
/// entry; `expected` is never partially overwritten.
pub fn load_model_like(expected: &TrainedModel, path: impl AsRef<Path>) -> Result<TrainedModel, CheckpointError> {
    let (store, meta) = load_checkpoint(path)?;
    let found = meta.get("kind").and_then(|k| k.as_str()).unwrap_or("unknown");
    if found != expected.kind_label() {
        return Err(CheckpointError::KindMismatch {
            found: found.to_string(),
            expected: expected.kind_label().to_string(),
        });
    }
    let mut out = expected.blank_like()?;
    ensure_compatible(out.params(), &store)?;
    out.params_mut().copy_values_from(&store)?;
    Ok(out)
}

/// Loads a checkpoint, rebuilding the architecture from its metadata.
pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel, CheckpointError> {
    let (store, meta) = load_checkpoint(path)?;
    let kind = meta.get("kind").and_then(|k| k.as_str()).unwrap_or("unknown");
    let mut out = blank(kind, meta.get("spec").unwrap_or(&serde_json::Value::Null))?;
    ensure_compatible(out.params(), &store)?;
    out.params_mut().copy_values_from(&store)?;
    Ok(out)
}

/// Saves then reloads, checking every group's checksum survived.
pub fn checkpoint_roundtrip(model: &TrainedModel, path: impl AsRef<Path>) -> Result<TrainedModel, CheckpointError> {
    save_model(model, &path)?;
    let back = load_model_like(model, &path)?;
    let before = model.params().checksums();
    let after = back.params().checksums();
    for (group, sum) in &before {
        if after.get(group) != Some(sum) {
            return Err(CheckpointError::NotBitIdentical(group.clone()));
        }
    }
    if after.len() != before.len() {
        return Err(CheckpointError::NotBitIdentical("<group set>".into()));
    }
    Ok(back)
}
