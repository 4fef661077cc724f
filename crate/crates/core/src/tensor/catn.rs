//! `CATN` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CATN" | u32 version (=1) | u32 count
//! count × { u32 name_len | name (UTF-8) | u8 rank | rank × u32 extent | u8 dtype | payload }
//! ```
//!
//! The payload is the raw little-endian scalar buffer, so a write/read
//! cycle reproduces every bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CATN";
pub const VERSION: u32 = 1;

/// A tensor of either supported precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested precision (exact when the dtypes match).
    pub fn to<F: Scalar>(&self) -> Tensor<F> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn to_any<F: Scalar>(t: &Tensor<F>) -> AnyTensor {
    match F::DTYPE {
        DType::F32 => AnyTensor::F32(t.cast()),
        DType::F64 => AnyTensor::F64(t.cast()),
    }
}

fn put_payload<F: Scalar>(t: &Tensor<F>, out: &mut Vec<u8>) {
    out.push(F::DTYPE as u8);
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode(entries: &[(String, AnyTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = t.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Contract(format!("rank {} too large for CATN", shape.len())))?;
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Contract(format!("extent {d} too large for CATN")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t {
            AnyTensor::F32(t) => put_payload(t, &mut out),
            AnyTensor::F64(t) => put_payload(t, &mut out),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected CATN".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32("tensor count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name_off = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: name_off as u64,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let tag_off = cur.pos;
        let dtype = DType::from_tag(cur.u8("dtype")?).ok_or_else(|| Error::Format {
            offset: tag_off as u64,
            msg: "unknown dtype tag".into(),
        })?;
        let n: usize = shape.iter().product();
        let payload_off = cur.pos;
        let payload = cur.take(n * dtype.size(), "payload")?;
        let bad_shape = |_| Error::Format {
            offset: payload_off as u64,
            msg: format!("invalid shape {shape:?} for tensor {name}"),
        };
        let t = match dtype {
            DType::F32 => AnyTensor::F32(
                Tensor::new(&shape, payload.chunks_exact(4).map(f32::read_le).collect())
                    .map_err(bad_shape)?,
            ),
            DType::F64 => AnyTensor::F64(
                Tensor::new(&shape, payload.chunks_exact(8).map(f64::read_le).collect())
                    .map_err(bad_shape)?,
            ),
        };
        entries.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            msg: "trailing bytes after last tensor".into(),
        });
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, AnyTensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    decode(&bytes)
}
