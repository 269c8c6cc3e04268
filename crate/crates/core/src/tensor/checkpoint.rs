//! The named-tensor checkpoint format.
//!
//! Layout: magic bytes `BEVSCAN1`, little-endian `u32` entry count, then per
//! entry a `u16` name length, the UTF-8 name, a `u8` rank, `rank` little-endian
//! `u32` extents, and the raw little-endian `f32` values in row-major order.
//!
//! Entries are written in name order (the map is sorted), so saving the same
//! parameters twice produces byte-identical files. Values are stored at 32-bit
//! precision; loading widens back to `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"BEVSCAN1";

/// A named collection of shaped `f64` buffers, sorted by name.
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic (expected \"BEVSCAN1\")")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn save(path: &Path, entries: &TensorMap) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len())
        .map_err(|_| CheckpointError::Malformed("too many entries".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, (shape, data)) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
        let rank = u8::try_from(shape.len())
            .map_err(|_| CheckpointError::Malformed(format!("rank too large for {name}")))?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CheckpointError::Malformed(format!(
                "{name}: shape {shape:?} does not describe {} values",
                data.len()
            )));
        }
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(rank);
        for &e in shape {
            let e = u32::try_from(e)
                .map_err(|_| CheckpointError::Malformed(format!("extent too large in {name}")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TensorMap, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();

    let magic = take(&mut cur, 8, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = u32::from_le_bytes(take(&mut cur, 4, "count")?.try_into().unwrap());
    let mut out = TensorMap::new();
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(&mut cur, 2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len, "name")?)
            .map_err(|e| CheckpointError::Malformed(format!("name is not UTF-8: {e}")))?
            .to_owned();
        let rank = take(&mut cur, 1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                u32::from_le_bytes(take(&mut cur, 4, "extent")?.try_into().unwrap()) as usize,
            );
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut cur, 4 * numel, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if out.insert(name.clone(), (shape, data)).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate entry {name}")));
        }
    }
    if !cur.is_empty() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after last entry",
            cur.len()
        )));
    }
    Ok(out)
}

fn take<'a>(
    cur: &mut &'a [u8],
    n: usize,
    what: &'static str,
) -> Result<&'a [u8], CheckpointError> {
    if cur.len() < n {
        return Err(CheckpointError::Truncated(what));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}
