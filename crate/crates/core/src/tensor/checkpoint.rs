//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"M2DT" | version: u32 | count: u32
//! count × ( name_len: u32 | name: utf-8 | rank: u32 | dims: rank × u64 | data: f64 × prod(dims) )
//! ```

use std::io::{Read, Write};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M2DT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + params.scalar_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(parse_err(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_err(offset: usize, detail: String) -> Error {
    Error::Parse {
        source_name: "checkpoint".into(),
        location: format!("byte offset {offset}"),
        detail,
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(parse_err(0, format!("bad magic {magic:?}, expected \"M2DT\"")));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            version,
            detail: format!("unsupported version, this build reads {CHECKPOINT_VERSION}"),
        });
    }
    let count = cur.u32("parameter count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let at = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| parse_err(at, format!("parameter name is not utf-8: {e}")))?
            .to_owned();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let at = cur.pos;
        let raw = cur.take(n * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor =
            Tensor::new(shape, data).map_err(|e| parse_err(at, format!("{name}: {e}")))?;
        params
            .insert(name, tensor)
            .map_err(|e| parse_err(at, e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(parse_err(cur.pos, "trailing bytes after last parameter".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut p = ParamSet::new();
        p.insert("a.weight", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::vector(vec![std::f64::consts::PI]).unwrap()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &p).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(back.get(back.id("a.weight").unwrap()).shape(), &[2, 3]);
    }

    #[test]
    fn bad_magic_names_offset() {
        let err = read_checkpoint(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(err.to_string().contains("byte offset 0"), "{err}");
    }

    #[test]
    fn truncation_is_reported() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &p).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_checkpoint(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn future_version_is_versioned_error() {
        let mut bytes = b"M2DT".to_vec();
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let err = read_checkpoint(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { version: 7, .. }));
    }
}
