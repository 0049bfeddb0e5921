//! JSON checkpoints and atomic file writes.
//!
//! Floats are written with round-trip precision, so a saved and reloaded
//! model is bit-identical to the original. The content hash of a checkpoint
//! is the SHA-256 of its file bytes.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SeatError};
use crate::model::{AttentionModel, AttentionScorer};
use crate::seat::{EpochStats, SeatConfig, SeatScorer};

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| SeatError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| SeatError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| SeatError::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `value` as JSON and returns the content hash.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let bytes = to_json(value)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads JSON and returns it with the content hash.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let bytes = std::fs::read(path).map_err(|e| SeatError::io(path, e))?;
    let value = serde_json::from_slice(&bytes)?;
    Ok((value, sha256_hex(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model: AttentionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub base_model_hash: String,
    /// `seat`, `attention-rp` or `attention-at`.
    pub method: String,
    pub config: SeatConfig,
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerCheckpoint {
    pub format_version: u32,
    pub scorer: AttentionScorer,
    pub provenance: Provenance,
}

impl ScorerCheckpoint {
    pub fn seat_scorer(&self) -> SeatScorer {
        SeatScorer {
            scorer: self.scorer.clone(),
            base_model_hash: self.provenance.base_model_hash.clone(),
            config: self.provenance.config.clone(),
            seed: self.provenance.seed,
        }
    }
}

fn check_version(v: u32, path: &Path) -> Result<()> {
    if v != CHECKPOINT_VERSION {
        return Err(SeatError::Data(format!(
            "{}: checkpoint format {v}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &AttentionModel) -> Result<String> {
    save_json(
        path,
        &ModelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            model: model.clone(),
        },
    )
}

pub fn load_model(path: &Path) -> Result<(AttentionModel, String)> {
    let (ck, hash): (ModelCheckpoint, String) = load_json(path)?;
    check_version(ck.format_version, path)?;
    ck.model.validate()?;
    Ok((ck.model, hash))
}

pub fn save_scorer(path: &Path, ck: &ScorerCheckpoint) -> Result<String> {
    save_json(path, ck)
}

pub fn load_scorer(path: &Path) -> Result<(ScorerCheckpoint, String)> {
    let (ck, hash): (ScorerCheckpoint, String) = load_json(path)?;
    check_version(ck.format_version, path)?;
    Ok((ck, hash))
}
