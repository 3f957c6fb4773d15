//! Binary checkpoint format for named tensor collections.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"LFCKPT"          6 bytes
//! version u32                currently 1
//! count   u32                number of tensors
//! per tensor, in ascending name order:
//!   name_len u32, name (UTF-8), rank u32, dims u32 × rank, payload f64 LE
//! ```
//!
//! Payloads are always f64 regardless of the in-memory scalar; for the f64
//! pipeline the round trip is bit-exact. Readers are strict: bad magic, short
//! reads, or trailing bytes are format errors naming the file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

const MAGIC: &[u8; 6] = b"LFCKPT";
const VERSION: u32 = 1;
/// Sanity cap: refuse absurd element counts before allocating.
const MAX_NUMEL: u64 = 1 << 30;

pub fn save_named<S: Scalar>(path: &Path, tensors: &BTreeMap<String, Tensor<S>>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(tensors.len()).expect("tensor count fits u32").to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&u32::try_from(name.len()).expect("name fits u32").to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&u32::try_from(t.rank()).expect("rank fits u32").to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_named<S: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<S>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor { path, bytes: &bytes, pos: 0 };

    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(r.fail("bad magic (not a checkpoint file)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {}", version)));
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_bytes = r.take(name_len)?.to_vec();
        let name = String::from_utf8(name_bytes).map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if numel > MAX_NUMEL {
            return Err(r.fail(format!("tensor {:?} claims {} elements", name, numel)));
        }
        let mut data = Vec::with_capacity(numel as usize);
        for _ in 0..numel {
            data.push(S::from_f64(f64::from_le_bytes(r.take(8)?.try_into().unwrap())));
        }
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(r.fail(format!("duplicate tensor name {:?}", name)));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!(
                "unexpected end of file (wanted {} bytes at offset {})",
                n, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::format(self.path, detail)
    }
}
