//! `NLW1` weight files.
//!
//! Layout (little-endian, no padding): magic `NLW1`; `u32` tensor count; per
//! tensor a `u32` name length, the UTF-8 name, a `u32` rank, `rank` × `u32`
//! extents, then the `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result, WeightFileError};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"NLW1";

pub fn encode_weights(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| WeightFileError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightFileError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, WeightFileError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != WEIGHT_MAGIC {
        return Err(WeightFileError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let name_len = r.u32(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("name of tensor {i}"))?)
            .map_err(|_| WeightFileError::BadName)?
            .to_string();
        let rank = r.u32(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("extents of {name}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("values of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|_| WeightFileError::ShapeMismatch {
            name: name.clone(),
            expected: vec![],
            found: shape.clone(),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn save_weights(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_weights(tensors)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(decode_weights(&bytes)?)
}
