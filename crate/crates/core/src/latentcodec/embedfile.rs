//! Ingestion format for externally computed embedding matrices.
//!
//! Layout (little-endian): magic `LFEMB1`, u32 record count, u32 L, u32 D,
//! then per record L·D f32 values followed by the sequence text as
//! u16 byte-length + bytes. Values are stored at f32 — the native width of
//! the protein-language-model exports this path exists for — and widened to
//! f64 on load, so a write→read round trip of f32-representable data is
//! bit-exact.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seqkit::{Sequence, Vocabulary};

const MAGIC: &[u8; 6] = b"LFEMB1";

pub fn write_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    items: &[(Tensor<f64>, Sequence)],
) -> Result<()> {
    let (l, d) = match items.first() {
        Some((m, _)) => {
            if m.rank() != 2 {
                return Err(Error::shape("write_embeddings", format!("matrix rank {}", m.rank())));
            }
            (m.shape()[0], m.shape()[1])
        }
        None => (0, 0),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(items.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for (m, seq) in items {
        if m.shape() != [l, d] {
            return Err(Error::shape(
                "write_embeddings",
                format!("matrix {:?} but file header is [{}, {}]", m.shape(), l, d),
            ));
        }
        for &v in m.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let text = vocab.format(seq);
        let bytes = text.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::contract(format!("sequence text {} bytes exceeds u16", bytes.len())));
        }
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read every (matrix, sequence) record. Strict: bad magic, truncation
/// (reported with the byte offset), or trailing bytes are format errors.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary) -> Result<Vec<(Tensor<f64>, Sequence)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(bytes.as_slice());

    let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        let at = cur.position();
        cur.read_exact(&mut b).map_err(|_| {
            Error::format(path, format!("truncated reading {} at byte offset {}", what, at))
        })?;
        Ok(b)
    };

    let magic = take(6, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}, expected {:?}", magic, MAGIC)));
    }
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let count = u32_at(take(4, "record count")?) as usize;
    let l = u32_at(take(4, "length header")?) as usize;
    let d = u32_at(take(4, "width header")?) as usize;
    if count > 0 && l.checked_mul(d).is_none_or(|n| n == 0 || n > (1 << 28)) {
        return Err(Error::format(path, format!("implausible matrix dims {}x{}", l, d)));
    }

    let mut out = Vec::with_capacity(count);
    for rec in 0..count {
        let raw = take(l * d * 4, &format!("matrix of record {}", rec))?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let matrix = Tensor::new(vec![l, d], vals)?;
        let tlen = u16::from_le_bytes(
            take(2, &format!("sequence length of record {}", rec))?.try_into().expect("2 bytes"),
        ) as usize;
        let text = String::from_utf8(take(tlen, &format!("sequence of record {}", rec))?)
            .map_err(|e| Error::format(path, format!("record {} sequence not UTF-8: {}", rec, e)))?;
        let seq = vocab
            .parse(&text)
            .map_err(|e| Error::format(path, format!("record {}: {}", rec, e)))?;
        out.push((matrix, seq));
    }
    if (cur.position() as usize) < bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after the last record", bytes.len() - cur.position() as usize),
        ));
    }
    Ok(out)
}
