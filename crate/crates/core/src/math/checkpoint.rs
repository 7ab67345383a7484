//! Parameter checkpoints: one flat little-endian `f64` blob plus a JSON
//! manifest mapping parameter names to shapes and byte offsets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub blob: String,
    pub params: Vec<ParamEntry>,
}

fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
    (prefix.with_extension("json"), prefix.with_extension("bin"))
}

pub fn save_checkpoint(prefix: &Path, params: &[&Tensor]) -> Result<()> {
    let (manifest_path, blob_path) = paths(prefix);
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for p in params {
        entries.push(ParamEntry { name: p.name().to_string(), shape: p.shape().to_vec(), offset: blob.len() });
        for v in p.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        blob: blob_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        params: entries,
    };
    fs::write(&blob_path, blob)?;
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads values into `params`, matching by name; every parameter must be present
/// with an identical shape.
pub fn load_checkpoint(prefix: &Path, params: &mut [&mut Tensor]) -> Result<()> {
    let (manifest_path, _) = paths(prefix);
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_path)?;
    for p in params.iter_mut() {
        let entry = manifest
            .params
            .iter()
            .find(|e| e.name == p.name())
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{}` missing from {}", p.name(), manifest_path.display())))?;
        if entry.shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                p.name(),
                entry.shape,
                p.shape()
            )));
        }
        let n = numel(&entry.shape);
        let end = entry.offset + n * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("parameter `{}` runs past the end of the blob", p.name())));
        }
        let vals: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        p.set_data(vals)?;
    }
    Ok(())
}
