//! Named-tensor weight files.
//!
//! Layout (little-endian): magic `GSDW`, `u32` version, then records until
//! end of file. Each record is `u32` name length, UTF-8 name, `u32` rank,
//! `rank × u32` dims, and `product(dims) × f32` row-major data.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSDW";
pub const VERSION: u32 = 1;

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = records.iter().map(|(n, t)| 12 + n.len() + 4 * (t.rank() + t.len())).sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("weight file", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("weight file", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("weight file", format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::format("weight file", e.to_string()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

/// Fails with a range error if a finite value would overflow `f32`.
pub fn save(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in records {
        if t.data().iter().any(|&v| v.is_finite() && !(v as f32).is_finite()) {
            return Err(Error::Range(format!("`{name}` exceeds the f32 range of weight files")));
        }
    }
    fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("w".into(), Tensor::from_rows(&[[1.5f64, -2.0]]))]);
        assert_eq!(&bytes[0..4], b"GSDW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], b'w');
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[25..29].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"NOPE\x01\0\0\0").is_err());
        let mut bytes = encode(&[("w".into(), Tensor::zeros(&[3]))]);
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn save_rejects_values_beyond_f32() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2], vec![1.0, 1e300]).unwrap();
        let err = save(&dir.path().join("w.gsdw"), &[("w".into(), t)]).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact_for_f32_values(
            vals in proptest::collection::vec(-1e6f32..1e6, 0..40),
            name in "[a-z.0-9]{1,20}",
        ) {
            let t = Tensor::new(vec![vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let back = decode(&encode(&[(name.clone(), t.clone())])).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(&back[0].1, &t);
        }
    }
}
