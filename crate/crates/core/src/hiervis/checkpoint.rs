//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `HVCK`, `u32` version, `u32` head count,
//! `u32` tensor count, then per tensor a `u32` name length, the UTF-8 name,
//! a `u32` rank, `u64` dims and the `f64` values in row-major order.

use std::path::Path;

use super::model::{ModelConfig, ToyModel};

pub const MAGIC: &[u8; 4] = b"HVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor '{0}' missing from checkpoint")]
    Missing(String),
    #[error("unexpected tensor '{0}'")]
    Unexpected(String),
    #[error("tensor '{name}' has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

pub fn encode_checkpoint(model: &ToyModel) -> Vec<u8> {
    let tensors = model.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.config().heads as u32).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.iter() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyModel, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let heads = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut raw = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| CheckpointError::Invalid("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CheckpointError::Invalid("shape overflow".into()))?;
        let body = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        raw.push(RawTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let shape_of = |name: &str| {
        raw.iter().find(|t| t.name == name).map(|t| t.shape.clone()).ok_or_else(|| CheckpointError::Missing(name.into()))
    };
    let emb = shape_of("decoder.token_embedding")?;
    let pos = shape_of("decoder.position_embedding")?;
    if emb.len() != 2 || pos.len() != 2 {
        return Err(CheckpointError::Invalid("embedding tensors must be 2-D".into()));
    }
    let cfg = ModelConfig { dim: emb[1], heads, vocab: emb[0], max_len: pos[0] };
    let mut model = ToyModel::zeros(cfg).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let mut seen = vec![false; raw.len()];
    for (name, mut t) in model.tensors_mut() {
        let i = raw.iter().position(|r| r.name == name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if raw[i].shape != t.shape() {
            return Err(CheckpointError::Shape { name, expected: t.shape().to_vec(), got: raw[i].shape.clone() });
        }
        for (dst, src) in t.iter_mut().zip(&raw[i].data) {
            *dst = *src;
        }
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CheckpointError::Unexpected(raw[i].name.clone()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, encode_checkpoint(model))?)
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
