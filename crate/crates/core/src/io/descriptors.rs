//! Descriptor dumps: magic `LGCNDESC`, `u32` version, `u64` count, `u32` dim,
//! `u32` precision (4 or 8 bytes per value), then `count` ids (`u64`) and
//! `count × dim` row-major little-endian values.

use std::path::Path;

use super::Cursor;
use crate::error::{format_err, Result};
use crate::head::Descriptor;

pub const MAGIC: &[u8; 8] = b"LGCNDESC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorDump {
    pub precision: Precision,
    pub dim: usize,
    pub rows: Vec<(u64, Descriptor)>,
}

impl DescriptorDump {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.precision.bytes() as u32).to_le_bytes());
        for (id, _) in &self.rows {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for (_, d) in &self.rows {
            for &v in d.as_slice() {
                match self.precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(buf, "descriptor dump");
        if c.take(8)? != MAGIC {
            return Err(format_err("descriptor dump", "bad magic"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(format_err("descriptor dump", format!("unsupported version {version}")));
        }
        let count = usize::try_from(c.u64()?).map_err(|_| format_err("descriptor dump", "count overflow"))?;
        let dim = c.u32()? as usize;
        let precision = match c.u32()? {
            4 => Precision::F32,
            8 => Precision::F64,
            p => return Err(format_err("descriptor dump", format!("precision {p}"))),
        };
        if dim == 0 {
            return Err(format_err("descriptor dump", "zero dimension"));
        }
        let need = dim
            .checked_mul(precision.bytes())
            .and_then(|row| row.checked_add(8))
            .and_then(|row| row.checked_mul(count))
            .ok_or_else(|| format_err("descriptor dump", "size overflow"))?;
        if need != c.remaining() {
            return Err(format_err(
                "descriptor dump",
                format!("expected {need} payload bytes, found {}", c.remaining()),
            ));
        }
        let ids = (0..count).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let raw = c.take(count * dim * precision.bytes())?;
        let values: Vec<f64> = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        };
        let rows = ids
            .into_iter()
            .zip(values.chunks(dim))
            .map(|(id, v)| (id, Descriptor::from_unit(v.to_vec())))
            .collect();
        Ok(Self { precision, dim, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}
