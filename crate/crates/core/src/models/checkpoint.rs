//! Binary checkpoint format.
//!
//! Layout, little endian throughout: magic `MMFW`, format version `u32`, kind
//! tag `u8`, config block (`u32` length + sorted `key=value` lines, metadata
//! keys prefixed `meta.`), parameter count `u32`, then per parameter its name
//! (`u32` length + UTF-8), rank `u32`, dims `u32 × rank` and `f32` data.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError, ModelKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMFW";
pub const FORMAT_VERSION: u32 = 1;
const META_PREFIX: &str = "meta.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("unknown model kind tag {0}")]
    UnknownKind(u8),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { found: ModelKind, expected: ModelKind },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match its embedded config: {0}")]
    Shape(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes a model to bytes.
pub fn to_bytes<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.kind().tag());
    let mut pairs = model.config().to_pairs();
    for (k, v) in &model.metadata {
        pairs.insert(format!("{META_PREFIX}{k}"), v.clone());
    }
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, model.params().len());
    for p in model.params() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 text".into()))
    }
}

/// Parses checkpoint bytes. With `expected`, a different stored kind is an
/// error.
pub fn from_bytes<S: Scalar>(bytes: &[u8], expected: Option<ModelKind>) -> Result<Model<S>, CheckpointError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    if c.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let tag = c.take(1)?[0];
    let kind = ModelKind::from_tag(tag).ok_or(CheckpointError::UnknownKind(tag))?;
    if let Some(expected) = expected {
        if expected != kind {
            return Err(CheckpointError::KindMismatch { found: kind, expected });
        }
    }
    let text = c.string()?;
    let mut config_pairs = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("config line `{line}`")))?;
        match k.strip_prefix(META_PREFIX) {
            Some(mk) => metadata.insert(mk.to_string(), v.to_string()),
            None => config_pairs.insert(k.to_string(), v.to_string()),
        };
    }
    let config = ModelConfig::from_pairs(&config_pairs).map_err(CheckpointError::Malformed)?;
    let count = c.u32()?;
    let mut values = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = c.string()?;
        let rank = c.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("shape of `{name}` overflows")))?;
        let raw = c.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| S::narrow(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        values.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let mut model = Model::with_params(kind, &config, values)?;
    model.metadata = metadata;
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

/// Loads a checkpoint; nothing is returned unless the whole file parses.
pub fn load_checkpoint<S: Scalar>(path: &Path, expected: Option<ModelKind>) -> Result<Model<S>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes, expected)
}
