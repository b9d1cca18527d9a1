//! `PSV1` parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PSV1"                      magic
//! u32                         parameter count
//! repeated:
//!   u32, [u8]                 id length, UTF-8 id
//!   u8                        trainable flag
//!   u32, [u64]                rank, extents
//!   [f64]                     row-major values (IEEE-754 bits)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{Parameter, ParameterSet};

pub const MAGIC: &[u8; 4] = b"PSV1";

pub fn encode(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.count(false) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.id().len() as u32).to_le_bytes());
        out.extend_from_slice(p.id().as_bytes());
        out.push(p.trainable() as u8);
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &e in p.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Schema {
            field: "checkpoint".into(),
            detail: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParameterSet> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Version {
        expected: "PSV1".into(),
        found: "<truncated>".into(),
    })?;
    if magic != MAGIC {
        return Err(Error::Version {
            expected: "PSV1".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| Error::Schema {
                field: "id".into(),
                detail: e.to_string(),
            })?
            .to_string();
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        params.insert(Parameter::new(id, data, &shape, trainable)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Schema {
            field: "checkpoint".into(),
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParameterSet) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
