//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "CKPT"
//! version  u32      1
//! count    u32      number of entries
//! entry × count:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim × u32)
//!   data     prod(dims) × f64
//! ```
//!
//! Entries are the store's parameters in creation order followed by its
//! buffers (batch-norm running statistics). Values are always written as f64.

use std::fs;
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let entries = store.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Parse(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse("checkpoint name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Parse("checkpoint shape overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint into `store`; every stored tensor must be present with the same shape.
pub fn read_checkpoint<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode_checkpoint(&bytes)?;
    let expected = store.named_tensors().len();
    if entries.len() != expected {
        return Err(Error::Validation(format!(
            "checkpoint has {} tensors, graph has {expected}",
            entries.len()
        )));
    }
    for (name, tensor) in entries {
        store.set_named(&name, tensor.cast())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![2], vec![1.5, -0.25]).unwrap()).unwrap();
        store.add_buffer("bn.mean", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let bytes = encode_checkpoint(&store);
        assert_eq!(&bytes[..4], b"CKPT");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + (4 + 1 + 4 + 4 + 16) + (4 + 7 + 4 + 4 + 8));
        let entries = decode_checkpoint(&bytes).unwrap();
        assert_eq!(entries[0].0, "w");
        assert_eq!(entries[0].1.data(), &[1.5, -0.25]);
        assert_eq!(entries[1].0, "bn.mean");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &store).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::zeros(&[2])).unwrap();
        other.add_buffer("bn.mean", Tensor::zeros(&[1])).unwrap();
        read_checkpoint(&path, &mut other).unwrap();
        assert_eq!(other.params()[0].value.data(), &[1.5f32, -0.25]);
        assert_eq!(other.buffers()[0].value.data(), &[3.0f32]);
    }

    #[test]
    fn rejects_corruption() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let bytes = encode_checkpoint(&store);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
