//! Versioned single-file checkpoints.
//!
//! Layout: the magic `SQACKPT\0`, a little-endian `u32` format version, a
//! `u64` header length, the JSON header (model config, step, tensor
//! directory), the tensors as little-endian `f32` in directory order, and a
//! SHA-256 digest of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::to_vec_f32;
use crate::registry::MetricRegistry;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SQACKPT\0";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(model: &Model, step: u64, path: &Path) -> Result<()> {
    let vars = model.store().vars();
    let header = Header {
        config: model.config().clone(),
        step,
        tensors: vars
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.clone(),
                shape: v.dims().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in vars.values() {
        for x in to_vec_f32(v.as_tensor())? {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corruption(msg.into())
}

/// Restores a model and the step it was saved at.
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64)> {
    let bytes = crate::error::read(path)?;
    if bytes.len() < MAGIC.len() + 12 + 32 {
        return Err(corrupt(format!("{} is truncated", path.display())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "checkpoint format {version}, this build reads format {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt(format!("{}: checksum mismatch (truncated or modified)", path.display())));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(e.to_string()))?;

    let model = Model::new(header.config)?;
    let vars = model.store().vars();
    if vars.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "checkpoint holds {} tensors, the configured model has {}",
            header.tensors.len(),
            vars.len()
        )));
    }
    let mut offset = header_end;
    for entry in &header.tensors {
        let var = vars
            .get(&entry.name)
            .ok_or_else(|| corrupt(format!("unexpected tensor `{}`", entry.name)))?;
        if var.dims() != entry.shape.as_slice() {
            return Err(corrupt(format!("tensor `{}` has the wrong shape", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let end = offset + 4 * n;
        if end > body.len() {
            return Err(corrupt("tensor data is truncated"));
        }
        let values: Vec<f32> = body[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        var.set(&Tensor::from_vec(values, entry.shape.as_slice(), var.device())?)?;
        offset = end;
    }
    if offset != body.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok((model, header.step))
}

/// Loads a checkpoint and checks that it predicts exactly `registry`.
pub fn load_checkpoint_expecting(path: &Path, registry: &MetricRegistry) -> Result<(Model, u64)> {
    let (model, step) = load_checkpoint(path)?;
    if let Some(diff) = registry_difference(model.registry(), registry) {
        return Err(Error::VersionMismatch(diff));
    }
    Ok((model, step))
}

/// Human-readable description of how two registries differ, if they do.
pub fn registry_difference(found: &MetricRegistry, expected: &MetricRegistry) -> Option<String> {
    if found == expected {
        return None;
    }
    let mut parts = Vec::new();
    let missing: Vec<&str> = expected.names().filter(|n| found.lookup(n).is_err()).collect();
    let extra: Vec<&str> = found.names().filter(|n| expected.lookup(n).is_err()).collect();
    if !missing.is_empty() {
        parts.push(format!("checkpoint lacks {}", missing.join(", ")));
    }
    if !extra.is_empty() {
        parts.push(format!("checkpoint adds {}", extra.join(", ")));
    }
    for spec in expected.specs() {
        if let Ok(other) = found.lookup(&spec.name) {
            if other != spec {
                parts.push(format!("metric {} is defined differently", spec.name));
            }
        }
    }
    if parts.is_empty() {
        parts.push("metric order differs".into());
    }
    Some(format!("registry mismatch: {}", parts.join("; ")))
}
