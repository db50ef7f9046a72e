//! On-disk sample format: a JSON manifest next to raw little-endian payloads.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sample::{LabelMask, SceneSample};
use super::split::DatasetSplit;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub num_classes: usize,
    pub payload: String,
    pub dtype: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub version: u32,
    pub sample_id: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
    pub band_valid: Vec<bool>,
    pub timestamps: Vec<u32>,
    pub payload: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelInfo>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes via a temporary sibling and renames, so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(Error::io(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(Error::io(format!("renaming to {}", path.display())))
}

fn manifest_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

/// Writes `<id>.json`, `<id>.f32` and, when labelled, `<id>.labels.i32` into `dir`.
/// Returns the manifest path.
pub fn write_sample(dir: &Path, sample: &SceneSample) -> Result<PathBuf> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
    let id = &sample.sample_id;
    let payload: Vec<u8> = sample.values.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let payload_name = format!("{id}.f32");
    write_atomic(&dir.join(&payload_name), &payload)?;
    let label = match &sample.label_mask {
        Some(m) => {
            let bytes: Vec<u8> = m.ids.iter().flat_map(|v| v.to_le_bytes()).collect();
            let name = format!("{id}.labels.i32");
            write_atomic(&dir.join(&name), &bytes)?;
            Some(LabelInfo {
                num_classes: m.num_classes,
                payload: name,
                dtype: "i32".into(),
                sha256: sha256_hex(&bytes),
            })
        }
        None => None,
    };
    let manifest = SampleManifest {
        version: SAMPLE_FORMAT_VERSION,
        sample_id: id.clone(),
        shape: sample.values.shape().to_vec(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        band_valid: sample.band_valid.clone(),
        timestamps: sample.timestamps.clone(),
        payload: payload_name,
        sha256: sha256_hex(&payload),
        label,
    };
    let path = manifest_path(dir, id);
    let json = serde_json::to_vec_pretty(&manifest).map_err(Error::json("encoding sample manifest"))?;
    write_atomic(&path, &json)?;
    Ok(path)
}

fn read_payload(path: &Path, expected: usize, sha: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(Error::io(format!("reading {}", path.display())))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if sha256_hex(&bytes) != sha {
        return Err(Error::Manifest(format!("checksum mismatch for {}", path.display())));
    }
    Ok(bytes)
}

/// Reads a sample from its manifest path.
pub fn read_sample(manifest: &Path) -> Result<SceneSample> {
    let text = fs::read(manifest).map_err(Error::io(format!("reading {}", manifest.display())))?;
    let m: SampleManifest =
        serde_json::from_slice(&text).map_err(Error::json(format!("parsing {}", manifest.display())))?;
    if m.version != SAMPLE_FORMAT_VERSION {
        return Err(Error::UnknownVersion {
            found: m.version,
            supported: SAMPLE_FORMAT_VERSION,
        });
    }
    if m.dtype != "f32" || m.byte_order != "little" {
        return Err(Error::Manifest(format!(
            "unsupported encoding {} / {}",
            m.dtype, m.byte_order
        )));
    }
    if m.shape.len() != 4 || m.band_valid.len() != m.shape[1] || m.timestamps.len() != m.shape[0] {
        return Err(Error::Manifest(format!(
            "shape {:?} inconsistent with {} band flags and {} timestamps",
            m.shape,
            m.band_valid.len(),
            m.timestamps.len()
        )));
    }
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let n: usize = m.shape.iter().product();
    let bytes = read_payload(&dir.join(&m.payload), n * 4, &m.sha256)?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let label_mask = match &m.label {
        Some(l) => {
            if l.dtype != "i32" {
                return Err(Error::Manifest(format!("unsupported label dtype {}", l.dtype)));
            }
            let hw = m.shape[2] * m.shape[3];
            let bytes = read_payload(&dir.join(&l.payload), hw * 4, &l.sha256)?;
            Some(LabelMask {
                ids: bytes
                    .chunks_exact(4)
                    .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
                num_classes: l.num_classes,
            })
        }
        None => None,
    };
    let sample = SceneSample {
        sample_id: m.sample_id,
        values: Tensor::from_vec(&m.shape, values)?,
        band_valid: m.band_valid,
        timestamps: m.timestamps,
        label_mask,
    };
    sample.validate().map_err(|e| Error::Manifest(e.to_string()))?;
    Ok(sample)
}

/// Dataset layout: `samples/` holding sample files and `split.json`.
pub fn write_dataset(dir: &Path, samples: &[SceneSample], split: &DatasetSplit) -> Result<()> {
    let sdir = dir.join("samples");
    for s in samples {
        write_sample(&sdir, s)?;
    }
    let json = serde_json::to_vec_pretty(split).map_err(Error::json("encoding split"))?;
    write_atomic(&dir.join("split.json"), &json)
}

pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    let path = dir.join("split.json");
    let text = fs::read(&path).map_err(Error::io(format!("reading {}", path.display())))?;
    serde_json::from_slice(&text).map_err(Error::json(format!("parsing {}", path.display())))
}

/// Loads the samples with the given ids from a dataset directory.
pub fn read_samples(dir: &Path, ids: &[String]) -> Result<Vec<SceneSample>> {
    let sdir = dir.join("samples");
    ids.iter().map(|id| read_sample(&manifest_path(&sdir, id))).collect()
}

/// Ids of every sample stored under `dir/samples`, sorted.
pub fn list_samples(dir: &Path) -> Result<Vec<String>> {
    let sdir = dir.join("samples");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&sdir).map_err(Error::io(format!("listing {}", sdir.display())))? {
        let name = entry
            .map_err(Error::io(format!("listing {}", sdir.display())))?
            .file_name()
            .to_string_lossy()
            .into_owned();
        if let Some(id) = name.strip_suffix(".json") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_scene, GeneratorConfig};

    fn small() -> SceneSample {
        let cfg = GeneratorConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        generate_synthetic_scene(3, &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = small();
        let path = write_sample(dir.path(), &s).unwrap();
        let back = read_sample(&path).unwrap();
        assert_eq!(back.sample_id, s.sample_id);
        assert_eq!(back.label_mask, s.label_mask);
        let bits = |x: &SceneSample| x.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn short_payload_is_a_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = small();
        let path = write_sample(dir.path(), &s).unwrap();
        let mut m: SampleManifest = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m.shape = vec![6, 6, 512, 512];
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        match read_sample(&path) {
            Err(Error::Truncated { expected, .. }) => assert_eq!(expected, 6 * 6 * 512 * 512 * 4),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_sample(dir.path(), &small()).unwrap();
        let mut m: SampleManifest = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m.version = 9;
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_sample(&path), Err(Error::UnknownVersion { found: 9, .. })));
    }

    #[test]
    fn shape_disagreeing_with_flags_is_a_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_sample(dir.path(), &small()).unwrap();
        let mut m: SampleManifest = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m.band_valid.pop();
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_sample(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let s = small();
        write_sample(dir.path(), &s).unwrap();
        let payload = dir.path().join(format!("{}.f32", s.sample_id));
        let mut bytes = fs::read(&payload).unwrap();
        bytes[10] ^= 1;
        fs::write(&payload, bytes).unwrap();
        assert!(matches!(
            read_sample(&manifest_path(dir.path(), &s.sample_id)),
            Err(Error::Manifest(_))
        ));
    }
}
