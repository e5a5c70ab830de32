use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::Model;
use super::params::ModelConfig;
use crate::error::{Error, Result};
use crate::layout::CompressionConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data file.
    pub offset: u64,
}

/// JSON side of a checkpoint. Tensor data lives in `data_file`, next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub compression: CompressionConfig,
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

fn data_path(manifest_path: &Path, data_file: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(data_file)
}

/// Writes `<stem>.json` and `<stem>.bin` (little-endian f32).
pub fn save_checkpoint(model: &Model, manifest_path: &Path, metadata: BTreeMap<String, String>) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .ok_or_else(|| io_err(manifest_path, "no file name"))?
        .to_string_lossy();
    let data_file = format!("{stem}.bin");
    let mut bytes = Vec::with_capacity(model.params.num_params() * 4);
    let mut tensors = Vec::new();
    for t in model.params.tensors() {
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            dtype: "f32".into(),
            offset: bytes.len() as u64,
        });
        for &x in t.data {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        model: model.config,
        compression: model.compression,
        data_file: data_file.clone(),
        tensors,
        metadata,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(manifest_path, e))?;
    let bin_path = data_path(manifest_path, &data_file);
    fs::write(&bin_path, bytes).map_err(|e| io_err(&bin_path, e))?;
    fs::write(manifest_path, json).map_err(|e| io_err(manifest_path, e))
}

/// Loads a checkpoint; every tensor must match the shape implied by the manifest's config.
pub fn load_checkpoint(manifest_path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| io_err(manifest_path, e))?;
    let bin_path = data_path(manifest_path, &manifest.data_file);
    let bytes = fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let mut model = Model::new(manifest.model, manifest.compression)?;

    let by_name: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if by_name.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint("duplicate tensor names".into()));
    }
    let mut expected = model.params.tensors_mut();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, manifest lists {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    for t in expected.iter_mut() {
        let entry = by_name
            .get(t.name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", t.name)))?;
        if entry.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, config implies {:?}",
                t.name, entry.shape, t.shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor {} has dtype {}", t.name, entry.dtype)));
        }
        let start = entry.offset as usize;
        let end = start + t.data.len() * 4;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past end of data", t.name)))?;
        for (x, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    drop(expected);
    Ok((model, manifest.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_f32(model: &Model) -> Model {
        let mut m = model.clone();
        for t in m.params.tensors_mut() {
            for x in t.data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        m
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let model = Model::new(
            ModelConfig {
                layers: 1,
                heads: 2,
                head_dim: 4,
                vocab: 11,
                seed: 5,
                ..ModelConfig::default()
            },
            CompressionConfig::new(2, 3, 1, 8).unwrap(),
        )
        .unwrap();
        let meta = BTreeMap::from([("task".to_string(), "copy".to_string())]);
        save_checkpoint(&model, &path, meta.clone()).unwrap();
        let (loaded, got_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, round_f32(&model));
        assert_eq!(got_meta, meta);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let model = Model::new(
            ModelConfig {
                layers: 1,
                heads: 1,
                head_dim: 4,
                vocab: 7,
                ..ModelConfig::default()
            },
            CompressionConfig::new(2, 1, 1, 8).unwrap(),
        )
        .unwrap();
        save_checkpoint(&model, &path, BTreeMap::new()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut manifest: Manifest = serde_json::from_str(&text).unwrap();
        manifest.model.vocab = 8;
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        manifest.model.vocab = 7;
        manifest.tensors[1].shape = vec![5];
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = Model::new(
            ModelConfig {
                layers: 0,
                heads: 1,
                head_dim: 2,
                vocab: 3,
                ..ModelConfig::default()
            },
            CompressionConfig::new(2, 0, 0, 8).unwrap(),
        )
        .unwrap();
        save_checkpoint(&model, &path, BTreeMap::new()).unwrap();
        let bin = dir.path().join("m.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
