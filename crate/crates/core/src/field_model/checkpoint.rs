//! The PGNET checkpoint container.
//!
//! ```text
//! "PGNET"                       5 bytes
//! version                       u16
//! role                          u8   (0 surrogate, 1 latent force, 2 forecast)
//! layer count L, widths         u32, u32 × L
//! x, y, t affine                f64 × 6  (offset, scale per axis)
//! source dims                   u32 × 3
//! output count h                u32
//! per output: name, mean, std   u32 length + UTF-8, f64, f64
//! parameter count P, params     u64, f64 × P
//! ```

use std::fs;
use std::path::Path;

use super::{AxisAffine, FieldNet, NetRole, NormalizationSpec, VarAffine};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NET_MAGIC: &str = "PGNET";
pub const NET_VERSION: u16 = 1;

/// Everything a PGNET file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct NetRecord {
    pub role: NetRole,
    pub widths: Vec<usize>,
    pub norm: NormalizationSpec,
    pub params: Vec<f64>,
}

pub fn encode_record(rec: &NetRecord) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(NET_MAGIC.as_bytes());
    w.u16(NET_VERSION);
    w.u8(rec.role.byte());
    w.u32(rec.widths.len() as u32);
    for &width in &rec.widths {
        w.u32(width as u32);
    }
    for a in [rec.norm.x, rec.norm.y, rec.norm.t] {
        w.f64(a.offset);
        w.f64(a.scale);
    }
    for d in rec.norm.source_dims {
        w.u32(d as u32);
    }
    w.u32(rec.norm.outputs.len() as u32);
    for o in &rec.norm.outputs {
        w.str(&o.name);
        w.f64(o.mean);
        w.f64(o.std);
    }
    w.u64(rec.params.len() as u64);
    w.f64s(rec.params.iter().copied());
    w.finish()
}

pub fn decode_record(bytes: &[u8]) -> Result<NetRecord> {
    let mut r = ByteReader::new(bytes);
    r.magic(NET_MAGIC)?;
    let version = r.u16("version")?;
    if version != NET_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: NET_VERSION,
        });
    }
    let role = NetRole::from_byte(r.u8("role")?)?;
    let layers = r.u32("widths")? as usize;
    if layers > 4096 {
        return Err(Error::malformed(format!("implausible layer count {layers}")));
    }
    let mut widths = Vec::with_capacity(layers);
    for _ in 0..layers {
        widths.push(r.u32("widths")? as usize);
    }
    let mut axes = [AxisAffine::IDENTITY; 3];
    for a in &mut axes {
        a.offset = r.f64("normalization")?;
        a.scale = r.f64("normalization")?;
    }
    let mut source_dims = [0usize; 3];
    for d in &mut source_dims {
        *d = r.u32("normalization")? as usize;
    }
    let h = r.u32("normalization")? as usize;
    let mut outputs = Vec::with_capacity(h.min(1024));
    for _ in 0..h {
        outputs.push(VarAffine {
            name: r.str("normalization")?,
            mean: r.f64("normalization")?,
            std: r.f64("normalization")?,
        });
    }
    let count = r.u64("params")?;
    let count = usize::try_from(count).map_err(|_| Error::malformed("parameter count overflows"))?;
    let params = r.f64s(count, "params")?;
    r.finish()?;
    Ok(NetRecord {
        role,
        widths,
        norm: NormalizationSpec {
            x: axes[0],
            y: axes[1],
            t: axes[2],
            outputs,
            source_dims,
        },
        params,
    })
}

pub fn encode_checkpoint<T: Scalar>(net: &FieldNet<T>) -> Vec<u8> {
    encode_record(&NetRecord {
        role: net.role,
        widths: net.widths.clone(),
        norm: net.norm.clone(),
        params: net.params.iter().map(|p| p.f64()).collect(),
    })
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<FieldNet<T>> {
    let rec = decode_record(bytes)?;
    if rec.widths.first() != Some(&3) {
        return Err(Error::malformed("coordinate network must take 3 inputs"));
    }
    FieldNet::from_parts(rec.widths, rec.params.into_iter().map(T::lit).collect(), rec.role, rec.norm)
}

pub fn save_checkpoint<T: Scalar>(net: &FieldNet<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<FieldNet<T>> {
    decode_checkpoint(&fs::read(path)?)
}
