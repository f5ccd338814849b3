//! Binary lattice fixtures.
//!
//! Layout, all integers little-endian `u32`:
//!
//! | field   | bytes |
//! |---------|-------|
//! | magic   | `b"TLAT"` |
//! | version | 4 (currently 1) |
//! | T       | 4 |
//! | U       | 4 |
//! | K       | 4 (`|V̄|`) |
//! | dtype   | 4 (1 = little-endian f64) |
//!
//! followed by `T·(U+1)·K` values in `[t][u][k]` row-major order.

use std::io::{Read, Write};

use ndarray::Array3;

use super::JointLattice;
use crate::error::{Error, Result};

pub const LATTICE_MAGIC: &[u8; 4] = b"TLAT";
pub const LATTICE_VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;

pub fn write_lattice<W: Write>(mut w: W, lattice: &JointLattice) -> Result<()> {
    w.write_all(LATTICE_MAGIC)?;
    for field in [
        LATTICE_VERSION,
        lattice.frames() as u32,
        lattice.label_len() as u32,
        lattice.classes() as u32,
        DTYPE_F64,
    ] {
        w.write_all(&field.to_le_bytes())?;
    }
    for v in lattice.logits().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_lattice<R: Read>(mut r: R) -> Result<JointLattice> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LATTICE_MAGIC {
        return Err(Error::Format(format!("bad lattice magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != LATTICE_VERSION {
        return Err(Error::Format(format!(
            "unsupported lattice version {version}"
        )));
    }
    let frames = read_u32(&mut r)? as usize;
    let label_len = read_u32(&mut r)? as usize;
    let classes = read_u32(&mut r)? as usize;
    let dtype = read_u32(&mut r)?;
    if dtype != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let count = frames * (label_len + 1) * classes;
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let logits = Array3::from_shape_vec((frames, label_len + 1, classes), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(JointLattice::new(logits))
}
