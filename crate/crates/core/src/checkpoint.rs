//! Checkpoint files: magic, header length, JSON header, raw little-endian f64 tensors.
//!
//! Tensors are stored as f64 so a reload reproduces forward outputs bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ArchConfig, Model};
use crate::training::{Checkpoint, EpochRecord, StageTag, TrainConfig};

const MAGIC: &[u8; 8] = b"XVCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    config: TrainConfig,
    stage: StageTag,
    step: u64,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(cp: &Checkpoint) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    let mut offset = 0;
    for p in cp.model.params() {
        tensors.push(TensorEntry {
            name: p.name,
            shape: p.shape,
            dtype: "f64".into(),
            offset,
        });
        offset += p.data.len();
        for v in p.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        arch: cp.model.arch,
        config: cp.config.clone(),
        stage: cp.stage,
        step: cp.step,
        history: cp.history.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Checkpoint, CheckpointError> {
    let bad = |reason: String| CheckpointError::Format {
        path: path.to_string(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let data = &bytes[16 + hlen..];
    if !data.len().is_multiple_of(8) {
        return Err(bad("tensor data is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut model = Model::init(header.arch, 0);
    let mut params = model.params_mut();
    if params.len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            params.len(),
            header.tensors.len()
        )));
    }
    let mut used = 0;
    for (i, (p, t)) in params.iter_mut().zip(&header.tensors).enumerate() {
        if p.name != t.name || p.shape != t.shape || t.dtype != "f64" {
            return Err(bad(format!(
                "tensors[{i}]: expected {} {:?} f64, found {} {:?} {}",
                p.name, p.shape, t.name, t.shape, t.dtype
            )));
        }
        let src = values
            .get(t.offset..t.offset + p.data.len())
            .ok_or_else(|| bad(format!("tensors[{i}] ({}): data out of range", t.name)))?;
        p.data.copy_from_slice(src);
        used += src.len();
    }
    drop(params);
    if used != values.len() {
        return Err(bad(format!("{} trailing values", values.len() - used)));
    }
    Ok(Checkpoint {
        model,
        config: header.config,
        stage: header.stage,
        step: header.step,
        history: header.history,
    })
}

/// Write via a temporary file and rename, so a reader never sees a partial file.
pub fn save(cp: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&to_bytes(cp)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes, &path.display().to_string())
}
