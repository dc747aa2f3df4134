//! Binary checkpoint format, version 1.
//!
//! Fixed 80 byte header, little endian throughout:
//!
//! | offset | bytes | field                                             |
//! |--------|-------|---------------------------------------------------|
//! | 0      | 4     | magic `MHDC`                                      |
//! | 4      | 4     | format version, u32                               |
//! | 8      | 12    | n1, n2, n3 as u32                                 |
//! | 20     | 24    | L1, L2, L3 as f64                                 |
//! | 44     | 16    | t, eps as f64                                     |
//! | 60     | 8     | dealias fraction as f64                           |
//! | 68     | 6     | basis tags, one byte per component, 0 cos / 1 sin |
//! | 74     | 2     | zero padding                                      |
//! | 76     | 4     | FNV-1a checksum of bytes 0..76, u32               |
//!
//! The payload is the six coefficient arrays in component order
//! u1, u2, u3, b1, b2, b3, each in logical row-major index order, one
//! interleaved (re, im) f64 pair per entry, so the payload length is exactly
//! `2 * 6 * n1 * n2 * n3 * 8` bytes with nothing after it.
//!
//! The reader rejects anything it would not itself write: bad magic or
//! checksum, unknown version, basis tags other than the velocity layout,
//! truncated or oversized payloads, non-finite values, and stored fields
//! that are not divergence-free. States assembled outside the solver should
//! be Leray-projected before being written.

use std::io::{ErrorKind, Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;

use crate::dynamics::State;
use crate::error::MhdError;
use crate::field::SpectralVectorField;
use crate::grid::{plan_grid, Grid, GridSpec};
use crate::ops::divergence;
use crate::Result;

pub const MAGIC: [u8; 4] = *b"MHDC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 80;
/// Cap on the header node count; corrupt dimensions must not drive huge
/// allocations before any payload byte is read.
const MAX_NODES: u64 = 1 << 22;
/// Velocity-like layout: horizontal components cosine, normal ones sine.
const BASIS_TAGS: [u8; 6] = [0, 0, 1, 0, 0, 1];
/// Relative divergence tolerance on read, loose enough for long-run rounding.
const DIV_TOL: f64 = 1e-8;

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub fn write_checkpoint_to<W: Write>(state: &State, w: &mut W) -> Result<()> {
    let grid = state.grid();
    let spec = grid.spec;
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(&MAGIC);
    h.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    h.extend_from_slice(&(spec.n1 as u32).to_le_bytes());
    h.extend_from_slice(&(spec.n2 as u32).to_le_bytes());
    h.extend_from_slice(&(spec.n3 as u32).to_le_bytes());
    h.extend_from_slice(&spec.l1.to_le_bytes());
    h.extend_from_slice(&spec.l2.to_le_bytes());
    h.extend_from_slice(&spec.l3.to_le_bytes());
    h.extend_from_slice(&state.t.to_le_bytes());
    h.extend_from_slice(&state.eps.to_le_bytes());
    h.extend_from_slice(&spec.dealias_fraction.to_le_bytes());
    h.extend_from_slice(&BASIS_TAGS);
    h.extend_from_slice(&[0u8; 2]);
    let sum = fnv1a(&h);
    h.extend_from_slice(&sum.to_le_bytes());
    debug_assert_eq!(h.len(), HEADER_LEN);
    w.write_all(&h)?;

    let (n1, n2, n3) = grid.shape();
    let mut buf: Vec<u8> = Vec::with_capacity(n1 * n2 * n3 * 16);
    for field in [&state.u, &state.b] {
        for comp in 0..3 {
            buf.clear();
            for c in field.c[comp].coeff.iter() {
                buf.extend_from_slice(&c.re.to_le_bytes());
                buf.extend_from_slice(&c.im.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn write_checkpoint<P: AsRef<Path>>(state: &State, path: P) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint_to(state, &mut f)?;
    f.flush()?;
    Ok(())
}

struct Header {
    spec: GridSpec,
    t: f64,
    eps: f64,
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().unwrap())
}

fn le_f64(b: &[u8]) -> f64 {
    f64::from_le_bytes(b.try_into().unwrap())
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            MhdError::CorruptHeader("file is shorter than the 80 byte header".into())
        } else {
            MhdError::Io(e)
        }
    })?;
    if h[0..4] != MAGIC {
        return Err(MhdError::CorruptHeader("bad magic".into()));
    }
    if fnv1a(&h[..76]) != le_u32(&h[76..80]) {
        return Err(MhdError::CorruptHeader("checksum mismatch".into()));
    }
    let version = le_u32(&h[4..8]);
    if version != FORMAT_VERSION {
        return Err(MhdError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n1 = le_u32(&h[8..12]) as u64;
    let n2 = le_u32(&h[12..16]) as u64;
    let n3 = le_u32(&h[16..20]) as u64;
    // Widened product: three u32 factors can overflow u64.
    let nodes = n1 as u128 * n2 as u128 * n3 as u128;
    if n1 == 0 || n2 == 0 || n3 == 0 || nodes > MAX_NODES as u128 {
        return Err(MhdError::CorruptHeader(format!(
            "grid {n1} x {n2} x {n3} outside the supported range"
        )));
    }
    let t = le_f64(&h[44..52]);
    let eps = le_f64(&h[52..60]);
    if !t.is_finite() || !eps.is_finite() || eps < 0.0 {
        return Err(MhdError::CorruptHeader(format!(
            "non-physical t = {t}, eps = {eps}"
        )));
    }
    if h[68..74] != BASIS_TAGS {
        return Err(MhdError::CorruptHeader(format!(
            "basis tags {:?} do not match the velocity layout",
            &h[68..74]
        )));
    }
    if h[74..76] != [0, 0] {
        return Err(MhdError::CorruptHeader("nonzero padding".into()));
    }
    let spec = GridSpec {
        n1: n1 as usize,
        n2: n2 as usize,
        n3: n3 as usize,
        l1: le_f64(&h[20..28]),
        l2: le_f64(&h[28..36]),
        l3: le_f64(&h[36..44]),
        dealias_fraction: le_f64(&h[60..68]),
    };
    Ok(Header { spec, t, eps })
}

pub fn read_checkpoint_from<R: Read>(r: &mut R) -> Result<State> {
    let hdr = read_header(r)?;
    let grid = plan_grid(hdr.spec)
        .map_err(|e| MhdError::CorruptHeader(format!("invalid grid parameters: {e}")))?;
    let (n1, n2, n3) = grid.shape();
    let mut u = SpectralVectorField::zeros_velocity(&grid);
    let mut b = SpectralVectorField::zeros_velocity(&grid);
    let mut buf = vec![0u8; n1 * n2 * n3 * 16];
    for (fname, field) in [("u", &mut u), ("b", &mut b)] {
        for comp in 0..3 {
            r.read_exact(&mut buf).map_err(|e| {
                if e.kind() == ErrorKind::UnexpectedEof {
                    MhdError::CorruptPayload(format!("payload truncated in {fname}{}", comp + 1))
                } else {
                    MhdError::Io(e)
                }
            })?;
            for (k, c) in field.c[comp].coeff.iter_mut().enumerate() {
                let re = le_f64(&buf[16 * k..16 * k + 8]);
                let im = le_f64(&buf[16 * k + 8..16 * k + 16]);
                if !re.is_finite() || !im.is_finite() {
                    return Err(MhdError::CorruptPayload(format!(
                        "non-finite coefficient in {fname}{}",
                        comp + 1
                    )));
                }
                *c = Complex64::new(re, im);
            }
        }
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(MhdError::CorruptPayload("trailing bytes after payload".into())),
        Err(e) => return Err(e.into()),
    }
    let scale = u.max_coeff().max(b.max_coeff());
    for (fname, f) in [("u", &u), ("b", &b)] {
        if divergence(f).max_coeff() > DIV_TOL * (1.0 + scale) {
            return Err(MhdError::CorruptPayload(format!(
                "{fname} is not divergence-free"
            )));
        }
    }
    State::new(u, b, hdr.t, hdr.eps)
}

pub fn read_checkpoint<P: AsRef<Path>>(path: P) -> Result<State> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint_from(&mut f)
}

/// Read a checkpoint that must live on the given grid. The returned state
/// carries its own planned grid, equal to `grid` by spec.
pub fn read_checkpoint_on<P: AsRef<Path>>(path: P, grid: &Arc<Grid>) -> Result<State> {
    let state = read_checkpoint(path)?;
    let found = state.grid().spec;
    let expected = grid.spec;
    if (found.n1, found.n2, found.n3) != (expected.n1, expected.n2, expected.n3) {
        return Err(MhdError::DimensionMismatch {
            found: (found.n1, found.n2, found.n3),
            expected: (expected.n1, expected.n2, expected.n3),
        });
    }
    if found != expected {
        return Err(MhdError::InvalidSpec(format!(
            "checkpoint domain {found:?} differs from target {expected:?}"
        )));
    }
    Ok(state)
}
