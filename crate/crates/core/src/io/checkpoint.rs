//! Minimal self-describing tensor archive.
//!
//! Layout: 4-byte magic `SFCK`, little-endian u32 format version, LE u64
//! manifest length, manifest JSON, then the payload — concatenated LE f32
//! blobs addressed by per-tensor byte offsets in the manifest. Round-trip
//! is bit-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{SfSpec, TeacherSpec};
use crate::numerics::tensor::Tensor;
use crate::params::{ParamStore, Role};
use crate::Result;

const MAGIC: [u8; 4] = *b"SFCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic: not a checkpoint archive")]
    BadMagic,
    #[error("unsupported archive version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt manifest: {0}")]
    Manifest(String),
    #[error("truncated payload: need {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("duplicate tensor name `{0}` in archive")]
    DuplicateName(String),
    #[error("tensor `{name}`: manifest shape does not match payload byte length")]
    LengthMismatch { name: String },
    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    Dtype { name: String, dtype: String },
}

/// Which model the archive holds, embedded verbatim in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpecSnapshot {
    Teacher(TeacherSpec),
    Student(SfSpec),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: SpecSnapshot,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    role: Role,
    offset: u64,
    nbytes: u64,
}

/// Low-level writer over an explicit entry list. Does not reject duplicate
/// names — [`save_checkpoint`] goes through a [`ParamStore`], which does.
pub fn write_archive(
    entries: &[(&str, &Tensor<f32>, Role)],
    spec: &SpecSnapshot,
    path: &Path,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(entries.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor, role) in entries {
        let offset = payload.len() as u64;
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            role: *role,
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest { format_version: VERSION, spec: spec.clone(), tensors };
    let manifest_bytes =
        serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
    let mut file = Vec::with_capacity(16 + manifest_bytes.len() + payload.len());
    file.extend_from_slice(&MAGIC);
    file.extend_from_slice(&VERSION.to_le_bytes());
    file.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    file.extend_from_slice(&manifest_bytes);
    file.extend_from_slice(&payload);
    fs::write(path, file)?;
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore<f32>, spec: &SpecSnapshot, path: &Path) -> Result<()> {
    let entries: Vec<(&str, &Tensor<f32>, Role)> =
        store.iter().map(|(name, p)| (name, &p.value, p.role)).collect();
    write_archive(&entries, spec, path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, SpecSnapshot)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(ArchiveError::Truncated { expected: 16, found: bytes.len() as u64 }.into());
    }
    if bytes[0..4] != MAGIC {
        return Err(ArchiveError::BadMagic.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ArchiveError::Version { found: version, expected: VERSION }.into());
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + manifest_len;
    if bytes.len() < payload_start {
        return Err(ArchiveError::Truncated {
            expected: payload_start as u64,
            found: bytes.len() as u64,
        }
        .into());
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| ArchiveError::Manifest(e.to_string()))?;
    if manifest.format_version != VERSION {
        return Err(ArchiveError::Version { found: manifest.format_version, expected: VERSION }
            .into());
    }
    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(ArchiveError::Dtype {
                name: entry.name.clone(),
                dtype: entry.dtype.clone(),
            }
            .into());
        }
        if store.contains(&entry.name) {
            return Err(ArchiveError::DuplicateName(entry.name.clone()).into());
        }
        let elems: usize = entry.shape.iter().product();
        if elems as u64 * 4 != entry.nbytes {
            return Err(ArchiveError::LengthMismatch { name: entry.name.clone() }.into());
        }
        let end = entry.offset + entry.nbytes;
        if end > payload.len() as u64 {
            return Err(ArchiveError::Truncated {
                expected: payload_start as u64 + end,
                found: bytes.len() as u64,
            }
            .into());
        }
        let blob = &payload[entry.offset as usize..end as usize];
        let data: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data), entry.role);
    }
    Ok((store, manifest.spec))
}
