//! Versioned checkpoint: JSON manifest plus a little-endian f32 payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HybridModel, ModelConfig};
use crate::data::io::{sha256_hex, write_atomic};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
/// Flattening order of pixels inside a patch; part of the compatibility contract.
pub const PATCH_ORDER: &str = "band-in-group,row,column";
const MANIFEST: &str = "checkpoint.json";
const PAYLOAD: &str = "params.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub patch_order: String,
    pub dtype: String,
    pub byte_order: String,
    pub payload: String,
    pub sha256: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Writes tensors back to back as f32 and returns the payload checksum.
pub fn write_tensors<'a, S: Scalar>(path: &Path, tensors: impl IntoIterator<Item = &'a Tensor<S>>) -> Result<String> {
    let mut bytes = Vec::new();
    for t in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_tensors<S: Scalar>(path: &Path, shapes: &[Vec<usize>], sha256: Option<&str>) -> Result<Vec<Tensor<S>>> {
    let bytes = fs::read(path).map_err(Error::io(format!("reading {}", path.display())))?;
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: total * 4,
            actual: bytes.len(),
        });
    }
    if let Some(expected) = sha256 {
        if sha256_hex(&bytes) != expected {
            return Err(Error::Manifest(format!("checksum mismatch for {}", path.display())));
        }
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|b| S::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64));
    shapes
        .iter()
        .map(|s| Tensor::from_vec(s, values.by_ref().take(s.iter().product()).collect()))
        .collect()
}

/// Saves model parameters and `extra` metadata into `dir`; returns the manifest path.
pub fn save_checkpoint<S: Scalar>(dir: &Path, model: &HybridModel<S>, extra: serde_json::Value) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
    let sha256 = write_tensors(&dir.join(PAYLOAD), model.params.iter().map(|p| &p.value))?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        patch_order: PATCH_ORDER.into(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        payload: PAYLOAD.into(),
        sha256,
        params: model
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        extra,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).map_err(Error::json("encoding checkpoint manifest"))?;
    write_atomic(&path, &json)?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(Error::io(format!("reading {}", path.display())))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&text).map_err(Error::json(format!("parsing {}", path.display())))?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnknownVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(Error::json(format!("parsing {}", path.display())))
}

/// Loads a checkpoint, rebuilding the model from its recorded configuration.
/// Every disagreement between the manifest and the rebuilt parameter table is reported.
pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<(HybridModel<S>, serde_json::Value)> {
    let manifest = read_manifest(dir)?;
    let mut problems = Vec::new();
    if manifest.patch_order != PATCH_ORDER {
        problems.push(format!(
            "patch order {:?} differs from {PATCH_ORDER:?}",
            manifest.patch_order
        ));
    }
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        problems.push(format!("unsupported encoding {} / {}", manifest.dtype, manifest.byte_order));
    }
    let mut model = HybridModel::<S>::new(manifest.config.clone(), 0)?;
    if model.params.len() != manifest.params.len() {
        problems.push(format!(
            "{} parameters recorded, model has {}",
            manifest.params.len(),
            model.params.len()
        ));
    }
    for (entry, p) in manifest.params.iter().zip(model.params.iter()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            problems.push(format!(
                "{} {:?} does not match {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::IncompatibleCheckpoint(problems));
    }
    let shapes: Vec<Vec<usize>> = manifest.params.iter().map(|e| e.shape.clone()).collect();
    let values = read_tensors::<S>(&dir.join(&manifest.payload), &shapes, Some(&manifest.sha256))?;
    for (p, v) in model.params.iter_mut().zip(values) {
        p.value = v;
    }
    Ok((model, manifest.extra))
}
