//! Binary snapshots of flow states.
//!
//! Layout (all little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `G2FSNAP\0` |
//! | 4 | format version (u32) |
//! | 4 | form degree (u32) |
//! | 56 | shape, 7 × u64 |
//! | 56 | periods, 7 × f64 |
//! | 4 | number of active axes n (u32) |
//! | 4n | active axes (u32, 0-based) |
//! | 8 | time t (f64) |
//! | 8 | step index (u64) |
//! | 8 | value count (u64) |
//! | 8·count | components as f64, point-major, canonical index order |
//! | 32 | SHA-256 of everything above |
//!
//! Files are written to a temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exterior::DIM;
use crate::flow::FlowState;
use crate::grid::{Field, FormField, GridSpec};
use crate::scalar::{lit, to_f64, Real};

pub const MAGIC: &[u8; 8] = b"G2FSNAP\0";
pub const VERSION: u32 = 1;

/// Largest ‖dφ‖∞ accepted when restoring.
pub const CLOSEDNESS_LIMIT: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a snapshot (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated snapshot: {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch")]
    Checksum,
    #[error("invalid header: {0}")]
    Header(String),
    #[error("grid mismatch: {0}")]
    Shape(String),
    #[error("restored form is not closed: ‖dφ‖∞ = {0:e}")]
    NotClosed(f64),
}

pub fn encode<T: Real>(state: &FlowState<T>) -> Vec<u8> {
    let phi = state.phi();
    let grid = phi.grid();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(phi.degree() as u32).to_le_bytes());
    for n in grid.shape() {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for l in grid.periods() {
        out.extend_from_slice(&to_f64(l).to_le_bytes());
    }
    let active = grid.active_axes();
    out.extend_from_slice(&(active.len() as u32).to_le_bytes());
    for &a in active {
        out.extend_from_slice(&(a as u32).to_le_bytes());
    }
    out.extend_from_slice(&to_f64(state.t()).to_le_bytes());
    out.extend_from_slice(&state.step_index().to_le_bytes());
    let data = phi.field().data();
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for &x in data {
        out.extend_from_slice(&to_f64(x).to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], SnapshotError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(SnapshotError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(SnapshotError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64, SnapshotError> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Decodes and validates a snapshot; nothing is returned unless every check
/// passes.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<FlowState<T>, SnapshotError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SnapshotError::Version { found: version });
    }
    let degree = r.u32("degree")? as usize;
    if degree != 3 {
        return Err(SnapshotError::Header(format!(
            "degree {degree}, expected 3"
        )));
    }
    let mut shape = [0usize; 7];
    for s in &mut shape {
        *s = r.u64("shape")? as usize;
    }
    let mut periods = [T::zero(); 7];
    for l in &mut periods {
        *l = lit(r.f64("periods")?);
    }
    let n_active = r.u32("active axes")? as usize;
    if n_active > 7 {
        return Err(SnapshotError::Header(format!("{n_active} active axes")));
    }
    let mut active = Vec::with_capacity(n_active);
    for _ in 0..n_active {
        active.push(r.u32("active axes")? as usize);
    }
    let t = r.f64("time")?;
    let step = r.u64("step")?;
    let count = r.u64("count")? as usize;
    let payload_end = r.pos.checked_add(
        count
            .checked_mul(8)
            .ok_or(SnapshotError::Truncated("data"))?,
    );
    match payload_end {
        Some(e) if e + 32 <= bytes.len() => {}
        _ => return Err(SnapshotError::Truncated("data")),
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(lit::<T>(r.f64("data")?));
    }
    let body_end = r.pos;
    let digest = r.take(32, "checksum")?;
    if r.pos != bytes.len() {
        return Err(SnapshotError::Header("trailing bytes".into()));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(SnapshotError::Checksum);
    }
    let grid = GridSpec::new(shape, periods).map_err(|e| SnapshotError::Header(e.to_string()))?;
    if grid.active_axes() != active.as_slice() {
        return Err(SnapshotError::Header(
            "active axes disagree with shape".into(),
        ));
    }
    let expected = grid.npoints() * DIM[3];
    if count != expected {
        return Err(SnapshotError::Shape(format!(
            "{count} values for {expected} expected"
        )));
    }
    let field =
        Field::from_vec(&grid, DIM[3], data).map_err(|e| SnapshotError::Shape(e.to_string()))?;
    let phi = FormField::from_field(3, field).map_err(|e| SnapshotError::Shape(e.to_string()))?;
    let closed = to_f64(phi.exterior_derivative().max_abs());
    if !(closed <= CLOSEDNESS_LIMIT) {
        return Err(SnapshotError::NotClosed(closed));
    }
    Ok(FlowState::new(lit(t), step, phi))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save<T: Real>(state: &FlowState<T>, path: &Path) -> Result<(), SnapshotError> {
    Ok(write_atomic(path, &encode(state))?)
}

pub fn load<T: Real>(path: &Path) -> Result<FlowState<T>, SnapshotError> {
    decode(&fs::read(path)?)
}

/// Checks that a restored state lives on the expected grid.
pub fn check_grid<T: Real>(state: &FlowState<T>, grid: &GridSpec<T>) -> Result<(), SnapshotError> {
    if state.phi().grid().same_as(grid) {
        Ok(())
    } else {
        Err(SnapshotError::Shape(format!(
            "snapshot shape {:?} differs from configured {:?}",
            state.phi().grid().shape(),
            grid.shape()
        )))
    }
}
