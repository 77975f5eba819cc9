//! Versioned, checksummed container for checkpoints and dataset caches.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "SPDCAST\0"
//! version     u32
//! kind        u32      1 = checkpoint, 2 = dataset
//! meta_len    u64
//! meta        meta_len bytes of UTF-8 JSON
//! n_arrays    u32
//! per array:
//!   name_len  u32
//!   name      name_len bytes UTF-8
//!   ndim      u32
//!   dims      ndim x u64
//!   data      product(dims) x f64
//! sha256      32 bytes over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPDCAST\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Checkpoint = 1,
    Dataset = 2,
}

impl Kind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Kind::Checkpoint),
            2 => Ok(Kind::Dataset),
            _ => Err(Error::Container(format!("unknown container kind {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Container("file is truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Container("length overflows usize".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Container("name is not UTF-8".into()))
    }
}

impl Container {
    pub fn new(kind: Kind, meta: serde_json::Value) -> Self {
        Self {
            kind,
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Container(format!("missing array {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 32 {
            return Err(Error::Container("file is truncated".into()));
        }
        if &buf[..8] != MAGIC {
            return Err(Error::Container("bad magic; not a speedcast file".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        let mut cur = Cursor { buf: body, pos: 8 };
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Container(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let kind = Kind::from_u32(cur.u32()?)?;
        let meta_len = cur.len()?;
        let meta = serde_json::from_slice(cur.take(meta_len)?)?;
        let n = cur.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = cur.u32()? as usize;
            let name = cur.string(name_len)?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.len()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|c| c.checked_mul(8))
                .ok_or_else(|| Error::Container("array size overflows".into()))?;
            let data = cur
                .take(count)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != body.len() {
            return Err(Error::Container("trailing bytes after the last array".into()));
        }
        Ok(Self { kind, meta, arrays })
    }

    /// Write via a temporary sibling file and rename, so a crash never
    /// leaves a half-written container under `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path, expect: Kind) -> Result<Self> {
        let c = Self::from_bytes(&std::fs::read(path)?)?;
        if c.kind != expect {
            return Err(Error::Container(format!("expected a {expect:?} file, found {:?}", c.kind)));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(Kind::Checkpoint, serde_json::json!({"x": 0.1, "name": "t"}));
        c.push("a.kernel", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f64::NAN, 0.1, 1e-300]).unwrap());
        c.push("s", Tensor::scalar(7.0));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.arrays.iter().zip(&back.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().to_bytes().unwrap();
        let i = bytes.len() - 40;
        bytes[i] ^= 0x01;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Checksum)));
    }

    #[test]
    fn truncation_and_version_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..20]).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 9;
        let err = Container::from_bytes(&v2).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
