//! Single-file checkpoint container.
//!
//! Byte layout (all integers little endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 8            | magic `MRISEQCK`                          |
//! | 4            | format version (u32, currently 1)         |
//! | 8            | metadata length `m` (u64)                 |
//! | m            | UTF-8 JSON [`CheckpointMeta`]             |
//! | 8 * n        | f64 payload, tensors in `meta.tensors`    |
//! | 4            | CRC-32 of every preceding byte            |

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig, ModelError, StateEntry};
use crate::ingestion::LabelSet;
use crate::preprocessing::PreprocessConfig;

pub const MAGIC: &[u8; 8] = b"MRISEQCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub name: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Provenance of the saved weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub fold_id: usize,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub label_set: LabelSet,
    pub preprocess: PreprocessConfig,
    pub optimizer: OptimizerInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorIndex {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub model_fingerprint: String,
    pub label_set: LabelSet,
    pub preprocess_fingerprint: String,
    pub training: TrainingInfo,
    pub tensors: Vec<TensorIndex>,
}

pub fn save_checkpoint(path: &Path, model: &Model, info: &TrainingInfo) -> Result<CheckpointMeta, ModelError> {
    let state = model.state();
    let mut tensors = Vec::with_capacity(state.len());
    let mut offset = 0;
    for e in &state {
        tensors.push(TensorIndex {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset,
        });
        offset += e.values.len();
    }
    let meta = CheckpointMeta {
        model_config: model.config().clone(),
        model_fingerprint: model.fingerprint(),
        label_set: info.label_set,
        preprocess_fingerprint: info.preprocess.fingerprint(),
        training: info.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut buf = Vec::with_capacity(24 + json.len() + offset * 8 + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for e in &state {
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(meta)
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

/// Reads the metadata block only, after verifying the whole file.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta, ModelError> {
    let bytes = fs::read(path)?;
    Ok(parse(&bytes)?.0)
}

fn parse(bytes: &[u8]) -> Result<(CheckpointMeta, &[u8]), ModelError> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic header"));
    }
    let version = LittleEndian::read_u32(&bytes[8..12]);
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let m = LittleEndian::read_u64(&bytes[12..20]) as usize;
    let body_end = bytes.len().checked_sub(4).ok_or_else(|| corrupt("truncated"))?;
    if 20usize.checked_add(m).is_none_or(|e| e > body_end) {
        return Err(corrupt("truncated metadata"));
    }
    let stored = LittleEndian::read_u32(&bytes[body_end..]);
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..20 + m]).map_err(|e| corrupt(e.to_string()))?;
    Ok((meta, &bytes[20 + m..body_end]))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), ModelError> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ModelError::Io(e),
        _ => corrupt(e.to_string()),
    })?;
    let (meta, payload) = parse(&bytes)?;
    if meta.model_config.fingerprint() != meta.model_fingerprint {
        return Err(ModelError::FingerprintMismatch {
            expected: meta.model_config.fingerprint(),
            found: meta.model_fingerprint.clone(),
        });
    }
    if payload.len() % 8 != 0 {
        return Err(corrupt("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(LittleEndian::read_f64).collect();
    let mut entries = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        let n: usize = t.shape.iter().product();
        let slice = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| corrupt(format!("tensor {} lies outside the payload", t.name)))?;
        entries.push(StateEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            values: slice.to_vec(),
        });
    }
    let mut model = build_model(&meta.model_config).map_err(|e| corrupt(e.to_string()))?;
    model.load_state(entries)?;
    Ok((model, meta))
}

/// Loads and rejects checkpoints whose architecture differs from `cfg`.
pub fn load_checkpoint_expecting(path: &Path, cfg: &ModelConfig) -> Result<(Model, CheckpointMeta), ModelError> {
    let (model, meta) = load_checkpoint(path)?;
    if meta.model_fingerprint != cfg.fingerprint() {
        return Err(ModelError::FingerprintMismatch {
            expected: cfg.fingerprint(),
            found: meta.model_fingerprint,
        });
    }
    Ok((model, meta))
}
