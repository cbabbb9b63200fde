//! Little-endian framing shared by the binary artifact formats.
//!
//! File layout: `magic[4] | version u32 | crc32 u32 | payload_len u64 | payload`.
//! The checksum covers the payload only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Default)]
pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn store(&mut self, store: &ParamStore) {
        self.u64(store.len() as u64);
        for (_, name, t) in store.iter() {
            self.str(name);
            self.u64(t.shape().len() as u64);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            self.f32s(t.data());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Parse("unexpected end of binary payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Parse("length overflows usize".into()))
    }

    pub fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.usize()?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Parse("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse("invalid UTF-8 string".into()))
    }

    pub fn store(&mut self) -> Result<ParamStore> {
        let n = self.usize()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = self.str()?;
            let rank = self.usize()?;
            let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            let data = self.f32s()?;
            store.insert(name, Tensor::new(&shape, data)?)?;
        }
        Ok(store)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes in binary payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Lowercase hex SHA-256, used to pin artifacts to the checkpoints built
/// from them.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn write_framed(path: &Path, magic: &[u8; 4], version: u32, payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a framed file, checking magic, version, length and checksum in
/// that order.
pub(crate) fn read_framed(path: &Path, magic: &[u8; 4], version: u32, what: &'static str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::Parse(format!("{} is not a {what} file", path.display())));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored: 0,
            computed: crc32fast::hash(&[]),
        });
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::Version {
            what,
            found,
            expected: version,
        });
    }
    let stored = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    let computed = crc32fast::hash(payload);
    if payload.len() as u64 != len || computed != stored {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    Ok(payload.to_vec())
}
