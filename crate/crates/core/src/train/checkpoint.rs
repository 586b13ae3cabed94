//! Checkpoint directories: `manifest.json` plus `params.bin`, a contiguous
//! little-endian `f32` blob whose layout the manifest describes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpeechTextSystem};
use crate::tensor::{Param, Parameterized, Tensor2D};

pub const FORMAT: &str = "speechemb-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub stage: String,
    pub step: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub params_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes named tensors into a manifest skeleton and blob.
pub fn pack<'a>(params: impl IntoIterator<Item = &'a Param<f32>>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for p in params {
        let (rows, cols) = p.shape();
        let offset = blob.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: p.name().to_string(),
            rows,
            cols,
            offset,
            bytes: blob.len() - offset,
        });
    }
    (entries, blob)
}

/// Checks that entries tile `blob` exactly, in order, and decodes them.
pub fn unpack(entries: &[TensorEntry], blob: &[u8]) -> Result<Vec<(String, Tensor2D<f32>)>> {
    let mut cursor = 0;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.offset != cursor || e.bytes != e.rows * e.cols * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` at offset {} ({} bytes) does not tile the blob at {}",
                e.name, e.offset, e.bytes, cursor
            )));
        }
        let end = cursor + e.bytes;
        let raw = blob.get(cursor..end).ok_or_else(|| {
            Error::Checkpoint(format!("blob truncated inside tensor `{}`", e.name))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((e.name.clone(), Tensor2D::new(e.rows, e.cols, data)?));
        cursor = end;
    }
    if cursor != blob.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            blob.len() - cursor
        )));
    }
    Ok(out)
}

pub fn save_checkpoint(
    dir: &Path,
    system: &SpeechTextSystem,
    stage: &str,
    step: u64,
    config_hash: &str,
) -> Result<Manifest> {
    let (tensors, blob) = pack(system.params());
    let manifest = Manifest {
        format: FORMAT.to_string(),
        stage: stage.to_string(),
        step,
        config_hash: config_hash.to_string(),
        model: system.config.clone(),
        params_sha256: sha256_hex(&blob),
        tensors,
    };
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(PARAMS_FILE), blob)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| {
        Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(SpeechTextSystem, Manifest)> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    if sha256_hex(&blob) != manifest.params_sha256 {
        return Err(Error::Checkpoint("params.bin does not match manifest digest".into()));
    }
    let tensors = unpack(&manifest.tensors, &blob)?;
    let mut system = SpeechTextSystem::new(&manifest.model)?;
    let mut params = system.params_mut();
    if params.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for (p, (name, value)) in params.iter_mut().zip(tensors) {
        if p.name() != name || p.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` {:?} does not match model parameter `{}` {:?}",
                value.shape(),
                p.name(),
                p.shape()
            )));
        }
        p.value = value;
    }
    Ok((system, manifest))
}
