//! Checkpoint files: named tensors with trainability flags plus the producing
//! stage, its configuration and its seed.
//!
//! Little-endian layout:
//!
//! ```text
//! "DDCK" u16 version
//! u32 meta_len, meta_len bytes of UTF-8 JSON, u32 crc32(meta)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u8 dtype, u8 trainable, u32 rank,
//!             rank × u32 extents, payload, u32 crc32(record)
//! ```
//!
//! The record checksum covers every record byte before it, so any single
//! corrupted byte is reported against the tensor it belongs to.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{DType, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DDCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint version {found} unsupported (expected {VERSION})")]
    Version { found: u16 },
    #[error("checkpoint truncated: bytes {start}..{end} missing, file has {len} bytes")]
    Truncated { start: usize, end: usize, len: usize },
    #[error("checkpoint metadata corrupted: {0}")]
    Meta(String),
    #[error("tensor {name:?} corrupted: {reason}")]
    Corrupt { name: String, reason: String },
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("tensor {name:?} has dtype {found:?}, expected {expected:?}")]
    DType { name: String, found: DType, expected: DType },
    #[error("tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint lacks tensor {0:?}")]
    Missing(String),
    #[error("checkpoint stage {found:?}, expected {expected}")]
    Stage { found: String, expected: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Provenance stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub stage: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub meta: Meta,
    pub params: ParamStore<T>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(stage: &str, seed: u64, config: serde_json::Value, params: ParamStore<T>) -> Self {
        Self { meta: Meta { stage: stage.to_string(), seed, config }, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&crc32fast::hash(&meta).to_le_bytes());
        put_u32(&mut out, self.params.len());
        for (name, p) in self.params.iter() {
            let start = out.len();
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.push(p.trainable as u8);
            put_u32(&mut out, p.value.rank());
            for &e in p.value.shape() {
                put_u32(&mut out, e);
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| CheckpointError::BadMagic { found: bytes[..bytes.len().min(4)].to_vec() })?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let meta_len = r.u32()?;
        let meta_bytes = r.take(meta_len)?;
        if r.u32()? as u32 != crc32fast::hash(meta_bytes) {
            return Err(CheckpointError::Meta("checksum mismatch".into()));
        }
        let meta: Meta = serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for i in 0..count {
            let start = r.pos;
            let name_len = r.u32()?;
            let name_bytes = r.take(name_len)?;
            let name = String::from_utf8_lossy(name_bytes).into_owned();
            let corrupt = |reason: &str| CheckpointError::Corrupt { name: name.clone(), reason: reason.to_string() };
            let dtype_code = r.take(1)?[0];
            let trainable = r.take(1)?[0];
            let rank = r.u32()?;
            if rank > 8 {
                return Err(corrupt(&format!("rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()?);
            }
            let dtype = DType::from_code(dtype_code);
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let width = dtype.map(|d| d.size()).unwrap_or(0);
            let payload = match numel.and_then(|n| n.checked_mul(width)) {
                Some(n) => r.take(n)?,
                None => return Err(corrupt("size overflow")),
            };
            let stored_crc = r.u32()? as u32;
            if stored_crc != crc32fast::hash(&bytes[start..r.pos - 4]) {
                return Err(corrupt(&format!("checksum mismatch in record {i}")));
            }
            let dtype = dtype.ok_or_else(|| corrupt(&format!("dtype code {dtype_code}")))?;
            if dtype != T::DTYPE {
                return Err(CheckpointError::DType { name, found: dtype, expected: T::DTYPE });
            }
            if trainable > 1 {
                return Err(corrupt(&format!("trainable flag {trainable}")));
            }
            let data: Vec<T> = payload.chunks_exact(width).map(T::read_le).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(corrupt("non-finite value"));
            }
            let value = Tensor::new(&shape, data).map_err(|e| corrupt(&e.to_string()))?;
            if params.contains(&name) {
                return Err(corrupt("duplicate name"));
            }
            params.insert(name, value, trainable == 1);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_stage(&self, stages: &[&str]) -> Result<(), CheckpointError> {
        if stages.contains(&self.meta.stage.as_str()) {
            Ok(())
        } else {
            Err(CheckpointError::Stage { found: self.meta.stage.clone(), expected: stages.join(" or ") })
        }
    }
}

/// Checks that `loaded` holds every tensor of `model` with the same shape.
pub fn validate_against<T: Scalar>(loaded: &ParamStore<T>, model: &ParamStore<T>) -> Result<(), CheckpointError> {
    for (name, p) in model.iter() {
        let got = loaded.get(name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if got.value.shape() != p.value.shape() {
            return Err(CheckpointError::Shape {
                name: name.clone(),
                expected: p.value.shape().to_vec(),
                found: got.value.shape().to_vec(),
            });
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.saturating_add(n);
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated { start: self.buf.len(), end, len: self.buf.len() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
