//! Model files: three header lines, then a JSON body.
//!
//! ```text
//! hurdlecast-model
//! version: 1
//! sha256: <hex digest of the body>
//! { ...JSON... }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FitMetadata, HurdleError, HurdleModel, StageModel};
use crate::panel::ModelSpec;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "hurdlecast-model";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    lag: u32,
    spec_hash: String,
    spec: String,
    tau1: Option<f64>,
    tau2: Option<f64>,
    meta: FitMetadata,
    stage1: StageModel,
    stage2: StageModel,
    stage3: StageModel,
}

pub fn model_to_string(model: &HurdleModel) -> Result<String, HurdleError> {
    let file = ModelFile {
        lag: model.lag,
        spec_hash: model.spec.hash(),
        spec: model.spec.to_toml_string(),
        tau1: model.tau1,
        tau2: model.tau2,
        meta: model.meta.clone(),
        stage1: model.stage1.clone(),
        stage2: model.stage2.clone(),
        stage3: model.stage3.clone(),
    };
    let body = serde_json::to_string_pretty(&file).map_err(|e| HurdleError::Format(e.to_string()))?;
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    Ok(format!("{MAGIC}\nversion: {MODEL_FORMAT_VERSION}\nsha256: {digest}\n{body}\n"))
}

pub fn model_from_str(text: &str) -> Result<HurdleModel, HurdleError> {
    let mut parts = text.splitn(4, '\n');
    let magic = parts.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(HurdleError::Format("missing `hurdlecast-model` header".into()));
    }
    let version = parts
        .next()
        .and_then(|l| l.strip_prefix("version: "))
        .ok_or_else(|| HurdleError::Format("missing version line".into()))?;
    if version.trim() != MODEL_FORMAT_VERSION.to_string() {
        return Err(HurdleError::VersionMismatch {
            found: version.trim().to_string(),
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let digest = parts
        .next()
        .and_then(|l| l.strip_prefix("sha256: "))
        .ok_or_else(|| HurdleError::Format("missing sha256 line".into()))?;
    let body = parts.next().unwrap_or_default();
    let body = body.strip_suffix('\n').unwrap_or(body);
    if hex::encode(Sha256::digest(body.as_bytes())) != digest.trim() {
        return Err(HurdleError::Checksum);
    }
    let file: ModelFile = serde_json::from_str(body).map_err(|e| HurdleError::Format(e.to_string()))?;
    let spec = ModelSpec::from_toml_str(&file.spec)?;
    if spec.hash() != file.spec_hash {
        return Err(HurdleError::Format("embedded spec does not match its recorded hash".into()));
    }
    let mut model = HurdleModel {
        lag: file.lag,
        spec,
        stage1: file.stage1,
        stage2: file.stage2,
        stage3: file.stage3,
        tau1: None,
        tau2: None,
        meta: file.meta,
    };
    if let (Some(a), Some(b)) = (file.tau1, file.tau2) {
        model.set_thresholds(a, b)?;
    }
    Ok(model)
}

pub fn save_model(model: &HurdleModel, path: &Path) -> Result<(), HurdleError> {
    fs::write(path, model_to_string(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<HurdleModel, HurdleError> {
    model_from_str(&fs::read_to_string(path)?)
}

/// Loads a model and refuses it if it was fit under a different spec.
pub fn load_model_for_spec(path: &Path, spec: &ModelSpec) -> Result<HurdleModel, HurdleError> {
    let model = load_model(path)?;
    let (current, fitted) = (spec.hash(), model.spec.hash());
    if current != fitted {
        return Err(HurdleError::SpecMismatch {
            model: fitted,
            current,
        });
    }
    Ok(model)
}
