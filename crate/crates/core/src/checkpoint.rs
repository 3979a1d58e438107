//! Model checkpoints: a JSON manifest next to a flat little-endian `f32`
//! blob. The manifest's `tensors` array gives names and shapes in blob order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::nn::Parameterized;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: String, message: String },
    #[error("blob holds {found} bytes, manifest declares {expected}")]
    BlobSize { found: usize, expected: usize },
    #[error("tensor {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("tensor {0} missing from checkpoint")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<stem>.json` (the `meta` object extended with `tensors`, `dtype`
/// and `blob`) and `<stem>.bin`.
pub fn save<M: Parameterized>(stem: &Path, meta: Value, model: &M) -> Result<(), CheckpointError> {
    let params = model.params();
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (_, name, tensor) in &params {
        let (r, c) = tensor.dim();
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [r, c],
        });
        for &v in tensor.iter() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut manifest = match meta {
        Value::Object(map) => map,
        _ => serde_json::Map::new(),
    };
    let blob_file = blob_path(stem);
    manifest.insert(
        "tensors".into(),
        serde_json::to_value(&entries).expect("entries serialize"),
    );
    manifest.insert("dtype".into(), Value::String("f32le".into()));
    manifest.insert(
        "blob".into(),
        Value::String(
            blob_file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        ),
    );
    let json = serde_json::to_string_pretty(&Value::Object(manifest)).expect("manifest serializes");
    let mpath = manifest_path(stem);
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    fs::write(&blob_file, blob).map_err(io_err(&blob_file))?;
    Ok(())
}

/// Reads the manifest only.
pub fn read_manifest(stem: &Path) -> Result<Value, CheckpointError> {
    let mpath = manifest_path(stem);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest {
        path: mpath.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads all tensors in manifest order.
pub fn read_tensors(stem: &Path) -> Result<Vec<(String, Array2<f64>)>, CheckpointError> {
    let manifest = read_manifest(stem)?;
    let mpath = manifest_path(stem);
    let entries: Vec<TensorEntry> = manifest
        .get("tensors")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| CheckpointError::Manifest {
            path: mpath.display().to_string(),
            message: e.to_string(),
        })?
        .ok_or_else(|| CheckpointError::Manifest {
            path: mpath.display().to_string(),
            message: "missing tensors".into(),
        })?;
    let bpath = blob_path(stem);
    let blob = fs::read(&bpath).map_err(io_err(&bpath))?;
    let expected: usize = entries.iter().map(|e| e.shape[0] * e.shape[1] * 4).sum();
    if blob.len() != expected {
        return Err(CheckpointError::BlobSize {
            found: blob.len(),
            expected,
        });
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let n = e.shape[0] * e.shape[1];
        let values: Vec<f64> = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        offset += 4 * n;
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), values)
            .expect("length matches declared shape");
        out.push((e.name, arr));
    }
    Ok(out)
}

/// Copies checkpoint tensors into a model with the same layout.
pub fn load_into<M: Parameterized>(stem: &Path, model: &mut M) -> Result<(), CheckpointError> {
    let mut tensors: std::collections::HashMap<String, Array2<f64>> =
        read_tensors(stem)?.into_iter().collect();
    for (_, name, param) in model.params_mut() {
        let loaded = tensors
            .remove(&name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if loaded.dim() != param.dim() {
            return Err(CheckpointError::Shape {
                name,
                found: loaded.dim(),
                expected: param.dim(),
            });
        }
        *param = loaded;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AttentionBlock;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = AttentionBlock::new(4, 6, 0.3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("block");
        save(&stem, serde_json::json!({"kind": "block"}), &block).unwrap();
        let mut other = AttentionBlock::new(4, 6, 0.3, &mut rng);
        load_into(&stem, &mut other).unwrap();
        for ((_, _, a), (_, _, b)) in block.params().into_iter().zip(other.params()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let manifest = read_manifest(&stem).unwrap();
        assert_eq!(manifest["kind"], "block");
        assert_eq!(manifest["dtype"], "f32le");

        let mut wrong = AttentionBlock::new(5, 6, 0.3, &mut rng);
        assert!(matches!(
            load_into(&stem, &mut wrong),
            Err(CheckpointError::Shape { .. })
        ));
    }
}
