//! Corpus files.
//!
//! Little-endian. Header: magic `EEGC`, `u16` version, `u32` record count.
//! Record: `u32` subject, `i32` label (`-1` for none), `f32` sample rate,
//! `u32` C, `u32` L, then `C·L` `f32` samples in channel-major order. Paired
//! files append `u32` H, `u32` W and `3·H·W` `f32` image values to every
//! record.

use std::path::Path;

use thiserror::Error;

use super::{EegRecording, PairedDataset, PairedSample, SignalError, Split};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"EEGC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("not a corpus file (magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("corpus version {found} unsupported (expected {VERSION})")]
    Version { found: u16 },
    #[error("corpus truncated: bytes {start}..{end} missing, file has {len} bytes")]
    Truncated { start: usize, end: usize, len: usize },
    #[error("record {record}: non-finite value")]
    NonFinite { record: usize },
    #[error("record {record}: {msg}")]
    Invalid { record: usize, msg: String },
    #[error("{0} trailing bytes after the last record")]
    Trailing(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Decoded file contents; images are present only in paired files.
#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Recordings(Vec<EegRecording>),
    Paired(Vec<(EegRecording, Tensor<f32>)>),
}

fn header(count: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_recording(out: &mut Vec<u8>, rec: &EegRecording) {
    out.extend_from_slice(&rec.subject_id.to_le_bytes());
    let label = rec.label.map_or(-1, |l| l as i32);
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&rec.sample_rate_hz.to_le_bytes());
    put_u32(out, rec.channels());
    put_u32(out, rec.len());
    for v in rec.samples().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_recordings(recs: &[EegRecording]) -> Vec<u8> {
    let mut out = header(recs.len());
    for r in recs {
        put_recording(&mut out, r);
    }
    out
}

pub fn encode_paired(ds: &PairedDataset) -> Vec<u8> {
    let mut out = header(ds.len());
    for p in &ds.items {
        put_recording(&mut out, &p.recording);
        put_u32(&mut out, p.image.shape()[1]);
        put_u32(&mut out, p.image.shape()[2]);
        for v in p.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CorpusError> {
        let end = self.pos.checked_add(n).unwrap_or(usize::MAX);
        if end > self.buf.len() {
            return Err(CorpusError::Truncated { start: self.buf.len(), end, len: self.buf.len() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CorpusError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, CorpusError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, record: usize) -> Result<Vec<f32>, CorpusError> {
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX))?;
        let out: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::NonFinite { record });
        }
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_header(r: &mut Reader) -> Result<usize, CorpusError> {
    let magic = r.take(4).map_err(|_| CorpusError::BadMagic { found: r.buf[..r.buf.len().min(4)].to_vec() })?;
    if magic != MAGIC {
        return Err(CorpusError::BadMagic { found: magic.to_vec() });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(CorpusError::Version { found: version });
    }
    Ok(r.u32()? as usize)
}

fn read_recording(r: &mut Reader, record: usize) -> Result<EegRecording, CorpusError> {
    let subject = r.u32()?;
    let label = r.i32()?;
    let fs = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let c = r.u32()? as usize;
    let len = r.u32()? as usize;
    let invalid = |msg: String| CorpusError::Invalid { record, msg };
    if c == 0 || len == 0 {
        return Err(invalid(format!("empty recording {c}x{len}")));
    }
    let label = match label {
        -1 => None,
        l if l >= 0 => Some(l as usize),
        l => return Err(invalid(format!("label {l}"))),
    };
    let samples = r.f32s(c.checked_mul(len).ok_or_else(|| invalid("size overflow".into()))?, record)?;
    EegRecording::new(c, len, samples, fs, subject, label).map_err(|e| match e {
        SignalError::NonFinite => CorpusError::NonFinite { record },
        e => invalid(e.to_string()),
    })
}

fn read_image(r: &mut Reader, record: usize) -> Result<Tensor<f32>, CorpusError> {
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if h == 0 || w == 0 {
        return Err(CorpusError::Invalid { record, msg: format!("empty image {h}x{w}") });
    }
    let data = r.f32s(3 * h * w, record)?;
    Tensor::new(&[3, h, w], data).map_err(|e| CorpusError::Invalid { record, msg: e.to_string() })
}

fn decode_with(bytes: &[u8], paired: bool) -> Result<Corpus, CorpusError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let count = read_header(&mut r)?;
    let mut recs = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..count {
        let rec = read_recording(&mut r, i)?;
        if paired {
            pairs.push((rec, read_image(&mut r, i)?));
        } else {
            recs.push(rec);
        }
    }
    if r.remaining() > 0 {
        return Err(CorpusError::Trailing(r.remaining()));
    }
    Ok(if paired { Corpus::Paired(pairs) } else { Corpus::Recordings(recs) })
}

pub fn decode_recordings(bytes: &[u8]) -> Result<Vec<EegRecording>, CorpusError> {
    match decode_with(bytes, false)? {
        Corpus::Recordings(r) => Ok(r),
        Corpus::Paired(_) => unreachable!(),
    }
}

/// Class count is taken from the largest label.
pub fn decode_paired(bytes: &[u8], split: Split) -> Result<PairedDataset, CorpusError> {
    let Corpus::Paired(pairs) = decode_with(bytes, true)? else { unreachable!() };
    let mut items = Vec::with_capacity(pairs.len());
    for (i, (recording, image)) in pairs.into_iter().enumerate() {
        let class = recording
            .label
            .ok_or_else(|| CorpusError::Invalid { record: i, msg: "paired record without label".into() })?;
        items.push(PairedSample { recording, image, class });
    }
    let classes = items.iter().map(|p| p.class + 1).max().unwrap_or(0);
    PairedDataset::new(items, split, classes).map_err(|e| CorpusError::Invalid { record: 0, msg: e.to_string() })
}

/// Tries the paired layout first; a file that does not parse as paired is
/// read as plain recordings.
pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus, CorpusError> {
    match decode_with(bytes, true) {
        Ok(c) => Ok(c),
        Err(e @ (CorpusError::BadMagic { .. } | CorpusError::Version { .. })) => Err(e),
        Err(_) => decode_with(bytes, false),
    }
}

pub fn save_recordings(path: &Path, recs: &[EegRecording]) -> Result<(), CorpusError> {
    Ok(std::fs::write(path, encode_recordings(recs))?)
}

pub fn save_paired(path: &Path, ds: &PairedDataset) -> Result<(), CorpusError> {
    Ok(std::fs::write(path, encode_paired(ds))?)
}

pub fn load_recordings(path: &Path) -> Result<Vec<EegRecording>, CorpusError> {
    decode_recordings(&std::fs::read(path)?)
}

pub fn load_paired(path: &Path, split: Split) -> Result<PairedDataset, CorpusError> {
    decode_paired(&std::fs::read(path)?, split)
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    decode_corpus(&std::fs::read(path)?)
}
