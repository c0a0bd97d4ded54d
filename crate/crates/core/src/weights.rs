//! Flat container of named `f64` tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "OATW"
//! version  u32      1
//! count    u32      number of entries
//! count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, extents (rank x u64)
//! payload: each entry's values in header order, row-major, f64 LE
//! ```
//!
//! Nothing follows the payload; trailing bytes are an error.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adam::load_named;
use crate::error::{Error, Result};
use crate::matcher::{Embedding, EmbeddingArch};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OATW";
pub const VERSION: u32 = 1;

/// Embedding trained offline on synthetic pairs for the default architecture
/// (`oatrack train-embedding` with default settings reproduces it).
pub const BUNDLED_EMBEDDING: &[u8] = include_bytes!("../assets/embedding.oatw");

/// The bundled embedding, if `arch` is the architecture it was trained for.
pub fn bundled_embedding(arch: &EmbeddingArch) -> Option<Embedding> {
    if *arch != EmbeddingArch::default() {
        return None;
    }
    let entries = decode(BUNDLED_EMBEDDING).expect("bundled weights decode");
    let mut e = Embedding::zeros(arch.clone()).expect("default architecture is valid");
    load_named(&mut e, &entries).expect("bundled weights fit the default architecture");
    Some(e)
}

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = entries.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(12 + payload + entries.len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    for (_, t) in entries {
        for v in t.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated while reading {} at byte {}", what, self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected OATW".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {}", version)));
    }
    let count = r.u32("entry count")? as usize;
    let mut headers = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = core::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("entry {} name is not UTF-8", i)))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut elems: usize = 1;
        for _ in 0..rank {
            let e = usize::try_from(r.u64("extent")?).map_err(|_| Error::Format("extent overflows".into()))?;
            elems = elems.checked_mul(e).ok_or_else(|| Error::Format(format!("{}: size overflows", name)))?;
            shape.push(e);
        }
        headers.push((String::from(name), shape, elems));
    }
    let mut out = Vec::with_capacity(headers.len());
    for (name, shape, elems) in headers {
        let raw = r.take(elems.checked_mul(8).ok_or_else(|| Error::Format("size overflows".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}
