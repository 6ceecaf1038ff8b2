//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "DNV3"
//! version   u32
//! count     u32
//! repeated `count` times:
//!   name_len  u32, then name_len bytes of UTF-8
//!   rank      u32, then rank x u64 extents
//!   dtype     u8   (0 = f32, 1 = f64)
//!   data      product(extents) elements, little-endian
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"DNV3";
pub const VERSION: u32 = 1;

pub fn encode<S: Scalar>(tensors: &[(String, Tensor<S>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(S::DTYPE as u8);
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decode a container, converting every tensor to `S`.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let tag = cur.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("dtype tag {tag}")))?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * dtype.size())?;
        let data: Vec<S> = match dtype {
            DType::F32 => raw.chunks(4).map(|b| S::c(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks(8).map(|b| S::c(f64::read_le(b))).collect(),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(out)
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save<S: Scalar>(path: &Path, tensors: &[(String, Tensor<S>)]) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), t)]);
        assert_eq!(&bytes[0..4], b"DNV3");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'w');
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(&bytes[21..29], &2u64.to_le_bytes());
        assert_eq!(bytes[29], 0);
        assert_eq!(&bytes[30..34], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 38);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode::<f32>(b"NOPE").is_err());
        let t = Tensor::<f64>::zeros(vec![3]);
        let mut bytes = encode(&[("x".into(), t)]);
        bytes.pop();
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn cross_precision_read() {
        let t = Tensor::<f64>::new(vec![1, 2], vec![0.5, 0.25]).unwrap();
        let back = decode::<f32>(&encode(&[("a".into(), t)])).unwrap();
        assert_eq!(back[0].1.data(), &[0.5f32, 0.25]);
    }
}
