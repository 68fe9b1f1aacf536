//! Binary checkpoint container: the magic `DOVE1`, a little-endian `u64`
//! header length, a JSON header, then raw little-endian `f32` blobs, each
//! with its own CRC32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Stage, Thresholds, TrainConfig};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 5] = b"DOVE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch in tensor `{0}`")]
    Checksum(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("config hash mismatch: checkpoint has {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint lacks tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

/// Training position and everything besides tensors needed to continue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Steps completed in `stage`.
    pub step: usize,
    pub config_hash: String,
    pub model_hash: String,
    pub config: TrainConfig,
    pub thresholds: Thresholds,
    pub optim_step: u64,
    pub disc_optim_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
    /// Number of `f32` values.
    pub len: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    meta: CheckpointMeta,
    tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn blob(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut metas = Vec::with_capacity(self.tensors.len());
        let mut blobs = Vec::new();
        for (name, t) in &self.tensors {
            let b = blob(t);
            metas.push(TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blobs.len() as u64,
                len: t.len() as u64,
                crc32: crc32fast::hash(&b),
            });
            blobs.extend_from_slice(&b);
        }
        let header = Header { format: FORMAT_VERSION, meta: self.meta.clone(), tensors: metas };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 8] =
            rest.get(..8).and_then(|s| s.try_into().ok()).ok_or_else(|| CheckpointError::Truncated("header length".into()))?;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let json = rest.get(8..8usize.saturating_add(hlen)).ok_or_else(|| CheckpointError::Truncated("header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format != FORMAT_VERSION {
            return Err(CheckpointError::Header(format!("unsupported format version {}", header.format)));
        }
        let blobs = &rest[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for m in &header.tensors {
            let start = m.offset as usize;
            let end = start.saturating_add(m.len as usize * 4);
            let b = blobs.get(start..end).ok_or_else(|| CheckpointError::Truncated(format!("tensor `{}`", m.name)))?;
            if crc32fast::hash(b) != m.crc32 {
                return Err(CheckpointError::Checksum(m.name.clone()));
            }
            let data = b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(m.shape.clone(), data).map_err(|e| CheckpointError::Header(format!("tensor `{}`: {e}", m.name)))?;
            tensors.push((m.name.clone(), t));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
