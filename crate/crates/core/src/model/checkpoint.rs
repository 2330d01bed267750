//! Checkpoints: a JSON manifest next to a raw little-endian f32 blob.
//!
//! ```text
//! <dir>/manifest.json   config, head, seed, step, tensor table
//! <dir>/params.bin      tensors back to back, f32 LE, in table order
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::{HeadKind, ModelConfig};
use super::forward::Model;
use super::params::ParamStore;
use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::RNG_ALGORITHM;
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "pulsegpt-checkpoint/1";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    rng: String,
    config: ModelConfig,
    head: HeadKind,
    #[serde(flatten)]
    meta: CheckpointMeta,
    blob: String,
    blob_bytes: usize,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, model: &Model<T>, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.scalar_count() * 4);
    let mut tensors = Vec::new();
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: blob.len() });
        for v in t.data() {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f32-le".into(),
        rng: RNG_ALGORITHM.into(),
        config: model.config.clone(),
        head: model.head,
        meta: meta.clone(),
        blob: BLOB_FILE.into(),
        blob_bytes: blob.len(),
        tensors,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    if manifest.format != FORMAT || manifest.dtype != "f32-le" {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint format {} / {}",
            manifest_path.display(),
            manifest.format,
            manifest.dtype
        )));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            blob_path.display(),
            manifest.blob_bytes,
            blob.len()
        )));
    }
    let mut tensors = IndexMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| Error::Data(format!("{}: tensor {} out of range", blob_path.display(), entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        tensors.insert(entry.name.clone(), Array::from_vec(&entry.shape, data)?);
    }
    let model = Model::from_params(manifest.config, manifest.head, ParamStore::from_tensors(tensors))?;
    Ok((model, manifest.meta))
}
