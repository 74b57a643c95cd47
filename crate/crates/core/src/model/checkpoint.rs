//! Checkpoints: a text manifest (config, dtype, per-tensor name/shape/byte
//! offset) next to a raw little-endian f64 blob. Round trips are bit-exact,
//! which the reproducibility guarantees lean on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this tensor's first value inside the blob.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    config: ModelConfig,
    entries: Vec<ManifestEntry>,
}

const FORMAT: &str = "lmlab-checkpoint-v1";
const DTYPE: &str = "f64le";

fn manifest_path(prefix: &Path) -> std::path::PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".manifest.json");
    p.into()
}

fn blob_path(prefix: &Path) -> std::path::PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".blob");
    p.into()
}

/// Write `<prefix>.manifest.json` and `<prefix>.blob`.
pub fn save(params: &ModelParams, prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = prefix.as_ref();
    let mut entries = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::new();
    for i in 0..params.len() {
        let t = params.tensor(i);
        entries.push(ManifestEntry {
            name: params.names()[i].clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: DTYPE.into(),
        config: params.config.clone(),
        entries,
    };
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(manifest_path(prefix), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(blob_path(prefix), blob)?;
    Ok(())
}

/// Read a checkpoint written by `save`. The manifest's parameter list must
/// describe the blob exactly; extra heads saved with the model come back too.
pub fn load(prefix: impl AsRef<Path>) -> Result<ModelParams> {
    let prefix = prefix.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(prefix))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::Checkpoint(format!("unknown dtype {:?}", manifest.dtype)));
    }
    let blob = fs::read(blob_path(prefix))?;
    let mut params = ModelParams::init(manifest.config.clone(), 0)?;

    // Base parameters first, attached heads after: recreate heads in
    // manifest order so indices line up with the canonical enumeration.
    let base_len = params.len();
    if manifest.entries.len() < base_len {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors but the config implies at least {base_len}",
            manifest.entries.len()
        )));
    }
    for (i, entry) in manifest.entries.iter().enumerate() {
        if i < base_len {
            if params.names()[i] != entry.name {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {:?} in the manifest but {:?} per the config",
                    entry.name,
                    params.names()[i]
                )));
            }
        } else {
            params.add_head(&entry.name, &entry.shape, 0)?;
        }
        let want_shape = params.tensor(i).shape();
        if want_shape != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} has shape {:?} in the manifest but {:?} per the config",
                entry.name, entry.shape, want_shape
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} spans bytes {start}..{end} but the blob holds {}",
                entry.name,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
            .collect();
        params.set_tensor(i, Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(params)
}
