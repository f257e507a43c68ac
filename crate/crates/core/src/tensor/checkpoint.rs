//! Named-parameter checkpoint file: a flat list of f64 arrays with dims,
//! protected by a trailing CRC-32.
//!
//! Layout (little-endian): magic `KPRM`, version u32, count u32; per entry
//! a u16 name length, the UTF-8 name, a u8 rank, rank u32 dims, then the
//! f64 payload; finally CRC-32 over every preceding byte.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"KPRM";
pub const VERSION: u32 = 1;
const MAX_RANK: u8 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {got:?}; not a checkpoint file")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported checkpoint version {got}")]
    UnsupportedVersion { got: u32 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("file ends early while reading {context}")]
    Truncated { context: &'static str },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// One named array. Rank-0 (empty dims, one value) holds scalars such as
/// optimizer step counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> ParamEntry {
        ParamEntry {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> ParamEntry {
        ParamEntry::new(name, vec![], vec![v])
    }
}

/// Writes entries in order; names must be unique.
pub fn save_checkpoint(path: &Path, entries: &[ParamEntry]) -> Result<(), CheckpointError> {
    let mut seen = std::collections::HashSet::new();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(CheckpointError::Malformed(format!(
                "duplicate parameter name {:?}",
                e.name
            )));
        }
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed("parameter name too long".into()));
        }
        if e.dims.len() > MAX_RANK as usize {
            return Err(CheckpointError::Malformed(format!(
                "rank {} exceeds the format maximum {MAX_RANK}",
                e.dims.len()
            )));
        }
        let numel: usize = e.dims.iter().product();
        if numel != e.data.len() {
            return Err(CheckpointError::Malformed(format!(
                "entry {:?}: dims {:?} want {numel} values, got {}",
                e.name,
                e.dims,
                e.data.len()
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.dims.len() as u8);
        for d in &e.dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &buf)?;
    Ok(())
}

/// Reads a checkpoint back, preserving entry order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<ParamEntry>, CheckpointError> {
    let buf = fs::read(path)?;
    if buf.len() < 4 + 4 + 4 + 4 {
        return Err(CheckpointError::Truncated { context: "header" });
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, context: &'static str| -> Result<&[u8], CheckpointError> {
        if *pos + n > body.len() {
            return Err(CheckpointError::Truncated { context });
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic: [u8; 4] = take(&mut pos, 4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { got: magic });
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { got: version });
    }
    let count = u32::from_le_bytes(take(&mut pos, 4, "count")?.try_into().unwrap());

    let mut entries = Vec::with_capacity(count as usize);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len, "name")?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Malformed(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let rank = take(&mut pos, 1, "rank")?[0];
        if rank > MAX_RANK {
            return Err(CheckpointError::Malformed(format!("rank {rank} too large")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4, "dims")?.try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = take(&mut pos, numel * 8, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(ParamEntry { name, dims, data });
    }
    if pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after last entry",
            body.len() - pos
        )));
    }
    Ok(entries)
}
