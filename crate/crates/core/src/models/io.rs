//! Checkpoints: a TOML manifest describing the model next to a raw
//! little-endian `f64` parameter file.
//!
//! Manifest fields, in order: `format`, `kind`, `layers`, `activation`,
//! `n_params`, `params_file`. The parameter file holds `n_params` values in
//! flat layout order (per layer: `W` row-major `out × in`, then `b`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::spec::{Activation, ModelKind, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::DenseVector;

pub const CHECKPOINT_FORMAT: &str = "lissa-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: ModelKind,
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub n_params: usize,
    /// Relative to the manifest's directory.
    pub params_file: String,
}

pub fn encode_params(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::invalid(format!(
            "parameter file length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes `<manifest>` and the parameter file `<manifest stem>.params`.
pub fn save_checkpoint(manifest_path: &Path, spec: &ModelSpec, theta: &ParamVector) -> Result<()> {
    if theta.len() != spec.n_params() {
        return Err(Error::mismatch("checkpoint parameters", spec.n_params(), theta.len()));
    }
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let params_file = format!("{stem}.params");
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        kind: spec.kind,
        layers: spec.layers.clone(),
        activation: spec.activation,
        n_params: spec.n_params(),
        params_file: params_file.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(manifest_path, text)?;
    fs::write(sibling(manifest_path, &params_file), encode_params(theta.as_slice()))?;
    Ok(())
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(ModelSpec, ParamVector)> {
    let text = fs::read_to_string(manifest_path)?;
    let parse_err = |message: String| Error::Parse {
        path: manifest_path.to_path_buf(),
        message,
    };
    let m: CheckpointManifest = toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(parse_err(format!("unsupported format `{}`", m.format)));
    }
    let spec = ModelSpec {
        kind: m.kind,
        layers: m.layers,
        activation: m.activation,
    };
    spec.validate()?;
    if spec.n_params() != m.n_params {
        return Err(parse_err(format!(
            "n_params {} disagrees with layers ({})",
            m.n_params,
            spec.n_params()
        )));
    }
    let values = decode_params(&fs::read(sibling(manifest_path, &m.params_file))?)?;
    if values.len() != m.n_params {
        return Err(Error::mismatch("checkpoint parameter file", m.n_params, values.len()));
    }
    let theta = ParamVector::new(DenseVector::from_vec(values), spec.zeros().layout().clone())?;
    Ok((spec, theta))
}

fn sibling(manifest_path: &Path, name: &str) -> PathBuf {
    manifest_path
        .parent()
        .map_or_else(|| PathBuf::from(name), |d| d.join(name))
}
