//! GSL1 binary tensor files: `"GSL1"`, u32 rank, rank x u64 extents, f64
//! payload. All integers and floats little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const GSL1_MAGIC: &[u8; 4] = b"GSL1";

pub fn write_tensor_to<W: Write>(mut w: W, t: &Tensor) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * t.shape().len() + 8 * t.numel());
    buf.extend_from_slice(GSL1_MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn read_tensor_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| corrupt(format!("unreadable tensor stream: {e}")))?;
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| corrupt("truncated tensor file"))
    };
    if take(0, 4)? != GSL1_MAGIC {
        return Err(corrupt("bad magic, expected GSL1"));
    }
    let rank = u32::from_le_bytes(take(4, 4)?.try_into().unwrap()) as usize;
    if rank == 0 || rank > 16 {
        return Err(corrupt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let e = u64::from_le_bytes(take(8 + 8 * i, 8)?.try_into().unwrap());
        shape.push(usize::try_from(e).map_err(|_| corrupt("extent overflow"))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| corrupt("extent overflow"))?;
    let offset = 8 + 8 * rank;
    let payload = numel
        .checked_mul(8)
        .ok_or_else(|| corrupt("extent overflow"))?;
    if bytes.len() != offset + payload {
        return Err(corrupt(format!(
            "truncated tensor file: expected {} payload bytes, found {}",
            payload,
            bytes.len().saturating_sub(offset)
        )));
    }
    let data = bytes[offset..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
}

/// Writes via a temporary sibling file and rename.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_tensor_to(&mut f, t).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::CorruptCheckpoint(m) => Error::CorruptCheckpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
