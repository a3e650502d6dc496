//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "NANOCNN1" | name_len | arch name | tensor_count |
//!   tensor_count × ( name_len | name | rank | dims[rank] | f32 data )
//! ```
//!
//! The architecture name carries the variant suffixes, so loading rebuilds the
//! exact layer list before filling in weights and batch-norm statistics.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{build_named, Model, ZooError};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NANOCNN1";

const MAX_RANK: usize = 8;
const MAX_NAME: usize = 4096;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint record '{0}' has an invalid shape")]
    DimOverflow(String),
    #[error("checkpoint does not match its architecture: {0}")]
    Mismatch(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error(transparent)]
    Zoo(#[from] ZooError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes every parameter and buffer of `model`.
pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let tensors = model.named_tensors();
    let mut buf = Vec::with_capacity(checkpoint_size(model));
    buf.extend_from_slice(MAGIC);
    let name = model.name();
    put_u32(&mut buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(&mut buf, tensors.len());
    for (n, t) in tensors {
        put_u32(&mut buf, n.len());
        buf.extend_from_slice(n.as_bytes());
        put_u32(&mut buf, t.rank());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Exact byte length of [`to_bytes`] for `model`.
pub fn checkpoint_size(model: &Model<f32>) -> usize {
    let header = MAGIC.len() + 4 + model.name().len() + 4;
    let records: usize = model
        .named_tensors()
        .iter()
        .map(|(n, t)| 4 + n.len() + 4 + 4 * t.rank() + 4 * t.len())
        .sum();
    header + records
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        if n > MAX_NAME {
            return Err(CheckpointError::Mismatch(format!("name length {n}")));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Mismatch("name is not UTF-8".into()))
    }
}

/// Parses a checkpoint. Nothing is returned unless every record is valid.
pub fn load_from_bytes(buf: &[u8]) -> Result<Model<f32>> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf, pos: MAGIC.len() };
    let arch = r.string()?;
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(CheckpointError::DimOverflow(name));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d) })
            .filter(|&l| l.checked_mul(4).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| CheckpointError::DimOverflow(name.clone()))?;
        let data: Vec<f32> = r
            .take(len * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push((name, Tensor::from_vec(&dims, data).map_err(|e| CheckpointError::Mismatch(e.to_string()))?));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes(buf.len() - r.pos));
    }

    let mut model = build_named::<f32>(&arch, &mut Rng::new(0))?;
    let expected = model.named_tensors().len();
    if expected != records.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{arch} has {expected} tensors, file has {}",
            records.len()
        )));
    }
    let mut it = records.into_iter();
    model.visit_tensors_mut(|name, slot| {
        let (rname, t) = it.next().expect("counts checked");
        if rname != name || t.shape() != slot.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {name} {:?}, found {rname} {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    })?;
    Ok(model)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    load_from_bytes(&std::fs::read(path)?)
}

/// Size of a checkpoint file in bytes.
pub fn model_size_bytes(path: impl AsRef<Path>) -> Result<u64> {
    Ok(std::fs::metadata(path)?.len())
}
