//! On-disk trajectory dataset: a little-endian binary container with
//! per-record CRC-32 integrity checks.
//!
//! Layout:
//! - header: magic `KBUB`, version u32, nx u32, nz u32, n_vars u32 (always
//!   4), n_records u32, dtype u8 (0 = f32, 1 = f64), 7 reserved bytes, then
//!   per-variable normalization stats as 4 x (mean f64, std f64);
//! - per record: n_specs u16; each spec as (kind u8, temperature f64,
//!   radius f64, stability f64, center_x f64, center_z f64); truncated u8;
//!   n_saved u32; `n_saved` snapshots of the four conserved fields
//!   (rho, rho_u1, rho_u3, rho_theta), each row-major nz x nx; CRC-32 of
//!   the record bytes.
//!
//! Snapshot times are not stored; state k of a record is at k times the
//! 5-second output cadence.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::euler::{Field2D, State2D};
use crate::pipeline::NormStats;
use crate::scenario::{BubbleKind, BubbleSpec, TrajectoryRecord};

pub const MAGIC: [u8; 4] = *b"KBUB";
pub const VERSION: u32 = 1;
pub const N_VARS: u32 = 4;
/// Output cadence used to reconstruct snapshot times on read.
pub const OUTPUT_INTERVAL: f64 = 5.0;

/// Payload precision. f32 halves the file size at ~1e-7 relative error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {got:?}; not a trajectory dataset")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported dataset version {got}")]
    UnsupportedVersion { got: u32 },
    #[error("checksum mismatch in record {record}")]
    ChecksumMismatch { record: usize },
    #[error("file ends early while reading {context}")]
    Truncated { context: &'static str },
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

/// A parsed dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub nx: u32,
    pub nz: u32,
    pub dtype: Dtype,
    pub stats: NormStats,
    pub records: Vec<TrajectoryRecord>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn value(&mut self, v: f64, dtype: Dtype) {
        match dtype {
            Dtype::F32 => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => self.f64(v),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(DatasetError::Truncated { context });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, DatasetError> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn value(&mut self, dtype: Dtype, context: &'static str) -> Result<f64, DatasetError> {
        match dtype {
            Dtype::F32 => Ok(f32::from_le_bytes(self.take(4, context)?.try_into().unwrap()) as f64),
            Dtype::F64 => self.f64(context),
        }
    }
}

fn encode_record(rec: &TrajectoryRecord, nx: u32, nz: u32, dtype: Dtype) -> Result<Vec<u8>, DatasetError> {
    let mut w = Writer::new();
    if rec.specs.len() > u16::MAX as usize {
        return Err(DatasetError::Malformed(format!(
            "too many bubble specs: {}",
            rec.specs.len()
        )));
    }
    w.u16(rec.specs.len() as u16);
    for s in &rec.specs {
        w.u8(s.kind.code());
        w.f64(s.temperature);
        w.f64(s.radius);
        w.f64(s.stability);
        w.f64(s.center_x);
        w.f64(s.center_z);
    }
    w.u8(rec.truncated as u8);
    w.u32(rec.states.len() as u32);
    for state in &rec.states {
        let (snz, snx) = state.shape();
        if (snx as u32, snz as u32) != (nx, nz) {
            return Err(DatasetError::Malformed(format!(
                "state shape {snz}x{snx} does not match dataset {nz}x{nx}"
            )));
        }
        for field in [&state.rho, &state.rho_u1, &state.rho_u3, &state.rho_theta] {
            for &v in field.data() {
                w.value(v, dtype);
            }
        }
    }
    Ok(w.buf)
}

/// Writes records and their normalization stats to `path`, one CRC per
/// record so later corruption is pinned to a specific trajectory.
pub fn write_dataset(
    path: &Path,
    nx: u32,
    nz: u32,
    dtype: Dtype,
    stats: &NormStats,
    records: &[TrajectoryRecord],
) -> Result<(), DatasetError> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.u32(nx);
    w.u32(nz);
    w.u32(N_VARS);
    w.u32(records.len() as u32);
    w.u8(dtype.code());
    w.buf.extend_from_slice(&[0u8; 7]);
    for k in 0..4 {
        w.f64(stats.mean[k]);
        w.f64(stats.std[k]);
    }
    for rec in records {
        let body = encode_record(rec, nx, nz, dtype)?;
        let crc = crc32fast::hash(&body);
        w.buf.extend_from_slice(&body);
        w.u32(crc);
    }
    fs::write(path, &w.buf)?;
    Ok(())
}

/// Parses a dataset file, verifying magic, version, and every record CRC.
pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);

    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(DatasetError::BadMagic { got: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion { got: version });
    }
    let nx = r.u32("nx")?;
    let nz = r.u32("nz")?;
    let n_vars = r.u32("n_vars")?;
    if n_vars != N_VARS {
        return Err(DatasetError::Malformed(format!(
            "expected {N_VARS} variables, found {n_vars}"
        )));
    }
    let n_records = r.u32("n_records")?;
    let dtype = Dtype::from_code(r.u8("dtype")?)
        .ok_or_else(|| DatasetError::Malformed("unknown dtype code".into()))?;
    r.take(7, "reserved")?;
    let mut stats = NormStats::default();
    for k in 0..4 {
        stats.mean[k] = r.f64("stats mean")?;
        stats.std[k] = r.f64("stats std")?;
    }

    let cells = nz as usize * nx as usize;
    let value_size = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut records = Vec::with_capacity(n_records as usize);
    for rec_idx in 0..n_records as usize {
        let rec_start = r.pos;
        let n_specs = r.u16("spec count")?;
        let mut specs = Vec::with_capacity(n_specs as usize);
        for _ in 0..n_specs {
            let kind = BubbleKind::from_code(r.u8("spec kind")?).ok_or_else(|| {
                DatasetError::Malformed(format!("unknown bubble kind in record {rec_idx}"))
            })?;
            specs.push(BubbleSpec {
                kind,
                temperature: r.f64("spec temperature")?,
                radius: r.f64("spec radius")?,
                stability: r.f64("spec stability")?,
                center_x: r.f64("spec center_x")?,
                center_z: r.f64("spec center_z")?,
            });
        }
        let truncated = match r.u8("truncated flag")? {
            0 => false,
            1 => true,
            other => {
                return Err(DatasetError::Malformed(format!(
                    "bad truncated flag {other} in record {rec_idx}"
                )))
            }
        };
        let n_saved = r.u32("n_saved")? as usize;
        // Bounds-check before allocating: the payload must actually be there.
        let payload = n_saved
            .checked_mul(4 * cells * value_size)
            .ok_or_else(|| DatasetError::Malformed("record size overflow".into()))?;
        if r.pos + payload + 4 > buf.len() {
            return Err(DatasetError::Truncated {
                context: "record payload",
            });
        }
        let mut states = Vec::with_capacity(n_saved);
        for k in 0..n_saved {
            let mut state = State2D::zeros(nz as usize, nx as usize);
            for field in [
                &mut state.rho,
                &mut state.rho_u1,
                &mut state.rho_u3,
                &mut state.rho_theta,
            ] {
                let mut data = Vec::with_capacity(cells);
                for _ in 0..cells {
                    data.push(r.value(dtype, "field payload")?);
                }
                *field = Field2D::from_vec(nz as usize, nx as usize, data)
                    .map_err(|e| DatasetError::Malformed(e.to_string()))?;
            }
            state.time = k as f64 * OUTPUT_INTERVAL;
            states.push(state);
        }
        let body = &buf[rec_start..r.pos];
        let stored_crc = r.u32("record checksum")?;
        if crc32fast::hash(body) != stored_crc {
            return Err(DatasetError::ChecksumMismatch { record: rec_idx });
        }
        records.push(TrajectoryRecord {
            specs,
            states,
            truncated,
        });
    }
    if r.pos != buf.len() {
        return Err(DatasetError::Malformed(format!(
            "{} trailing bytes after last record",
            buf.len() - r.pos
        )));
    }

    Ok(Dataset {
        nx,
        nz,
        dtype,
        stats,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_records(nz: usize, nx: usize) -> Vec<TrajectoryRecord> {
        let mut records = Vec::new();
        for r in 0..3 {
            let mut states = Vec::new();
            for k in 0..4usize {
                let mut s = State2D::zeros(nz, nx);
                for c in 0..nz * nx {
                    let base = (r * 100 + k * 10 + c) as f64;
                    s.rho.data_mut()[c] = 1.0 + base * 1e-3;
                    s.rho_u1.data_mut()[c] = (base * 0.7).sin();
                    s.rho_u3.data_mut()[c] = (base * 0.3).cos();
                    s.rho_theta.data_mut()[c] = 300.0 + base * 1e-2;
                }
                s.time = k as f64 * OUTPUT_INTERVAL;
                states.push(s);
            }
            records.push(TrajectoryRecord {
                specs: vec![BubbleSpec {
                    kind: if r == 0 { BubbleKind::Hot } else { BubbleKind::Cold },
                    temperature: 303.4 + r as f64 * 0.01,
                    radius: 42.0,
                    stability: 50.0,
                    center_x: 400.0,
                    center_z: 200.0,
                }],
                states,
                truncated: r == 2,
            });
        }
        records
    }

    fn stats() -> NormStats {
        NormStats {
            mean: [1.0, 0.1, -0.1, 300.0],
            std: [0.01, 0.5, 0.5, 1.5],
        }
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kbub");
        let records = sample_records(5, 6);
        write_dataset(&path, 6, 5, Dtype::F64, &stats(), &records).unwrap();
        let ds = read_dataset(&path).unwrap();
        assert_eq!(ds.nx, 6);
        assert_eq!(ds.nz, 5);
        assert_eq!(ds.dtype, Dtype::F64);
        assert_eq!(ds.stats, stats());
        assert_eq!(ds.records, records, "f64 round trip must be exact");
    }

    #[test]
    fn f32_round_trip_rounds_once() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kbub");
        let records = sample_records(4, 4);
        write_dataset(&path, 4, 4, Dtype::F32, &stats(), &records).unwrap();
        let ds = read_dataset(&path).unwrap();
        for (rec, orig) in ds.records.iter().zip(&records) {
            for (s, so) in rec.states.iter().zip(&orig.states) {
                for (f, fo) in [
                    (&s.rho, &so.rho),
                    (&s.rho_u1, &so.rho_u1),
                    (&s.rho_u3, &so.rho_u3),
                    (&s.rho_theta, &so.rho_theta),
                ] {
                    for (a, b) in f.data().iter().zip(fo.data()) {
                        assert_eq!(*a, *b as f32 as f64, "payload must be the f32 rounding");
                    }
                }
            }
        }
        // Writing the rounded data again is byte-identical.
        let path2 = dir.path().join("t2.kbub");
        write_dataset(&path2, 4, 4, Dtype::F32, &ds.stats, &ds.records).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(&path2).unwrap(),
            "second write of f32 data must be byte-identical"
        );
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.kbub");
        write_dataset(&path, 8, 8, Dtype::F64, &NormStats::default(), &[]).unwrap();
        let ds = read_dataset(&path).unwrap();
        assert!(ds.records.is_empty());
    }

    #[test]
    fn corrupted_payload_names_the_record() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kbub");
        let records = sample_records(4, 4);
        write_dataset(&path, 4, 4, Dtype::F64, &stats(), &records).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Header is 29 bytes + 64 stats; record 0 spans its specs + payload.
        // Flip one bit around the middle of the file (inside record 1).
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::ChecksumMismatch { record }) => {
                assert_eq!(record, 1, "middle byte falls in the second record");
            }
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kbub");
        write_dataset(&path, 4, 4, Dtype::F64, &stats(), &sample_records(4, 4)).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad_magic = dir.path().join("m.kbub");
        fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(
            read_dataset(&bad_magic),
            Err(DatasetError::BadMagic { .. })
        ));

        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        let bad_version = dir.path().join("v.kbub");
        fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(
            read_dataset(&bad_version),
            Err(DatasetError::UnsupportedVersion { got: 99 })
        ));
    }

    #[test]
    fn truncated_file_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kbub");
        write_dataset(&path, 4, 4, Dtype::F64, &stats(), &sample_records(4, 4)).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut = dir.path().join("cut.kbub");
        fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(
            read_dataset(&cut),
            Err(DatasetError::Truncated { .. })
        ));
    }

    #[test]
    fn times_are_reconstructed_on_the_output_grid() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kbub");
        write_dataset(&path, 4, 4, Dtype::F64, &stats(), &sample_records(4, 4)).unwrap();
        let ds = read_dataset(&path).unwrap();
        for rec in &ds.records {
            for (k, s) in rec.states.iter().enumerate() {
                assert_eq!(s.time, k as f64 * 5.0);
            }
        }
    }
}
