//! Binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ASEG" | u32 version | u64 architecture fingerprint | u64 init seed | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 ndim | u32 dims[ndim] | f32 data[numel]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ASEG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensors {
    pub fingerprint: u64,
    pub seed: u64,
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl NamedTensors {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut buf = Vec::with_capacity(64 + payload);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.fingerprint.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "missing ASEG magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported format version {version}"),
            ));
        }
        let fingerprint = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?
                .to_owned();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::format(origin, format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                origin,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self {
            fingerprint,
            seed,
            entries,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.origin,
                    format!(
                        "truncated: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.bytes.len()
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_file_is_rejected() {
        let nt = NamedTensors {
            fingerprint: 7,
            seed: 1,
            entries: vec![("w".into(), Tensor::full([2, 2], 0.5))],
        };
        let bytes = nt.to_bytes();
        let p = Path::new("mem");
        assert_eq!(NamedTensors::from_bytes(&bytes, p).unwrap(), nt);
        assert!(NamedTensors::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(NamedTensors::from_bytes(&bad, p).is_err());
    }
}
