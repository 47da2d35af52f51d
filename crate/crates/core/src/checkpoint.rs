//! Versioned container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! | field        | bytes                    |
//! |--------------|--------------------------|
//! | magic        | `b"CVID"`                |
//! | version      | u32                      |
//! | precision    | u8 (32 or 64)            |
//! | entry count  | u32                      |
//!
//! followed per entry by: name length (u32), UTF-8 name, rank (u32), one u64
//! per extent, then the payload as IEEE-754 values of the stated precision.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CVID";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(entries: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::PRECISION.tag());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
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

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
}

/// Decodes a checkpoint, converting the payload to `T` if the stored
/// precision differs.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let tag = r.take(1, "precision")?[0];
    let precision = Precision::from_tag(tag).ok_or_else(|| r.fail(format!("unknown precision tag {tag}")))?;
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail("name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let width = precision.byte_width();
        let payload = r.take(n * width, "payload")?;
        let data: Vec<T> = payload
            .chunks_exact(width)
            .map(|c| match precision {
                Precision::F32 => T::from_f64(f32::read_le(c) as f64),
                Precision::F64 => T::from_f64(f64::read_le(c)),
            })
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.fail(e.to_string()))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(entries)
}

pub fn save<T: Scalar>(path: &Path, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let bytes = encode(&[("w", &t)]);
        assert_eq!(&bytes[..4], b"CVID");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 32);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 1);
        // name len, name, rank, extent, payload
        assert_eq!(bytes.len(), 13 + 4 + 1 + 4 + 8 + 8);
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let t = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("a", &t)]);
        let p = Path::new("mem");
        assert!(matches!(
            decode::<f64>(&bytes[..bytes.len() - 1], p),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad, p).is_err());
        let widened: Vec<(String, Tensor<f32>)> = decode(&bytes, p).unwrap();
        assert_eq!(widened[0].1.data(), &[1.0f32, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4) {
            let n = values.len() / rows * rows;
            prop_assume!(n > 0);
            let t = Tensor::<f64>::from_f64(&[rows, n / rows], &values[..n]).unwrap();
            let bytes = encode(&[("layer.0.w", &t), ("b", &t)]);
            let back: Vec<(String, Tensor<f64>)> = decode(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, "layer.0.w");
            prop_assert_eq!(&back[0].1, &t);
        }
    }
}
