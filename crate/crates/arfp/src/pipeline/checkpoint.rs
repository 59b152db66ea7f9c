//! Versioned checkpoint container.
//!
//! Layout: an 8-byte magic, a u32 format version, a u32 kind tag, a u64
//! payload length, then the serialized object. Loading validates magic,
//! version, and kind before deserializing. Files are byte-deterministic for
//! identical state, so their SHA-256 doubles as the reproducibility hash.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::adversary::AdversaryParams;
use crate::error::{Error, Result};
use crate::frmetrics::EmbedderParams;
use crate::objectives::TrainState;

const MAGIC: &[u8; 8] = b"ARFPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum CheckpointKind {
    TrainState = 1,
    Embedder = 2,
    Adversary = 3,
}

impl CheckpointKind {
    fn from_u32(v: u32) -> Option<CheckpointKind> {
        match v {
            1 => Some(CheckpointKind::TrainState),
            2 => Some(CheckpointKind::Embedder),
            3 => Some(CheckpointKind::Adversary),
            _ => None,
        }
    }
}

fn encode<T: Serialize>(kind: CheckpointKind, value: &T) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(value)
        .map_err(|e| Error::Config(format!("checkpoint serialization failed: {e}")))?;
    let mut bytes = Vec::with_capacity(24 + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(kind as u32).to_le_bytes());
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&payload);
    Ok(bytes)
}

fn decode<T: DeserializeOwned>(kind: CheckpointKind, bytes: &[u8], path: &Path) -> Result<T> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(Error::io(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::io(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let file_kind = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if CheckpointKind::from_u32(file_kind) != Some(kind) {
        return Err(Error::io(
            path,
            format!("checkpoint kind {file_kind} does not match the expected kind"),
        ));
    }
    let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != 24 + len {
        return Err(Error::io(path, "truncated checkpoint"));
    }
    serde_json::from_slice(&bytes[24..])
        .map_err(|e| Error::io(path, format!("checkpoint payload invalid: {e}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    write_file(path, &encode(CheckpointKind::TrainState, state)?)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    decode(CheckpointKind::TrainState, &read_file(path)?, path)
}

pub fn save_embedder(params: &EmbedderParams, path: &Path) -> Result<()> {
    write_file(path, &encode(CheckpointKind::Embedder, params)?)
}

pub fn load_embedder(path: &Path) -> Result<EmbedderParams> {
    decode(CheckpointKind::Embedder, &read_file(path)?, path)
}

pub fn save_adversary(params: &AdversaryParams, path: &Path) -> Result<()> {
    write_file(path, &encode(CheckpointKind::Adversary, params)?)
}

pub fn load_adversary(path: &Path) -> Result<AdversaryParams> {
    decode(CheckpointKind::Adversary, &read_file(path)?, path)
}

/// SHA-256 of a checkpoint file on disk.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = read_file(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
