//! The PGWF grid-file container.
//!
//! ```text
//! "PGWF"                      4 bytes
//! version                     u16
//! T, m, n, h                  u32 × 4   (frames, y rows, x columns, variables)
//! x0, dx, y0, dy, t0, dt      f64 × 6
//! space unit, time unit       u32 length + UTF-8, × 2
//! variable names              u32 length + UTF-8, × h
//! payload                     f64 × T·m·n·h, layout [t][y][x][var]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::data_io::grid::{Axis, GridField, GridMeta};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const GRID_MAGIC: &str = "PGWF";
pub const GRID_VERSION: u16 = 1;

pub fn encode<T: Scalar>(field: &GridField<T>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    let meta = field.meta();
    w.bytes(GRID_MAGIC.as_bytes());
    w.u16(GRID_VERSION);
    for d in [field.nt(), field.ny(), field.nx(), field.nvars()] {
        w.u32(d as u32);
    }
    w.f64s([
        meta.x.origin,
        meta.x.step,
        meta.y.origin,
        meta.y.step,
        meta.t.origin,
        meta.t.step,
    ]);
    w.str(&meta.space_unit);
    w.str(&meta.time_unit);
    for name in field.names() {
        w.str(name);
    }
    w.f64s(field.data().iter().map(|v| v.f64()));
    w.finish()
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<GridField<T>> {
    let mut r = ByteReader::new(bytes);
    r.magic(GRID_MAGIC)?;
    let version = r.u16("version")?;
    if version != GRID_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: GRID_VERSION,
        });
    }
    let nt = r.u32("dims")? as usize;
    let ny = r.u32("dims")? as usize;
    let nx = r.u32("dims")? as usize;
    let h = r.u32("dims")? as usize;
    let c: Vec<f64> = r.f64s(6, "coordinates")?;
    let space_unit = r.str("units")?;
    let time_unit = r.str("units")?;
    let mut names = Vec::with_capacity(h.min(1024));
    for _ in 0..h {
        names.push(r.str("name table")?);
    }
    let count = nt
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nx))
        .and_then(|v| v.checked_mul(h))
        .ok_or_else(|| Error::malformed("dimension product overflows"))?;
    let payload = r.f64s(count, "payload")?;
    r.finish()?;
    let meta = GridMeta {
        x: Axis::new(c[0], c[1], nx),
        y: Axis::new(c[2], c[3], ny),
        t: Axis::new(c[4], c[5], nt),
        space_unit,
        time_unit,
    };
    GridField::new(meta, names, payload.into_iter().map(T::lit).collect())
}

pub fn save<T: Scalar>(field: &GridField<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(field))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<GridField<T>> {
    decode(&fs::read(path)?)
}
