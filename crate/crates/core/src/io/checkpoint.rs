//! Checkpoints: a flat archive of named `f64` tensors behind a JSON header.
//!
//! Layout (little-endian): magic `LGCNCKPT`, `u32` version, `u32` header
//! length, header JSON, `u32` entry count, then per entry `u32` name length,
//! UTF-8 name, `u32` rank, `u64` dims, and the `f64` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Cursor;
use crate::config::ModelConfig;
use crate::error::{format_err, Result};
use crate::model::Lgcn;
use crate::params::{named, Parameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LGCNCKPT";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    /// Free-form provenance such as the epoch a checkpoint was taken at.
    #[serde(default)]
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Lgcn, note: impl Into<String>) -> Self {
        Self {
            header: Header {
                model: model.cfg.clone(),
                note: note.into(),
            },
            entries: named(model, ""),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("config serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(buf, "checkpoint");
        if c.take(8)? != MAGIC {
            return Err(format_err("checkpoint", "bad magic"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(format_err("checkpoint", format!("unsupported version {version}")));
        }
        let hlen = c.u32()? as usize;
        let header: Header = serde_json::from_slice(c.take(hlen)?)?;
        let count = c.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(c.remaining() / 16));
        for _ in 0..count {
            let nlen = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(nlen)?)
                .map_err(|_| format_err("checkpoint", "entry name is not UTF-8"))?
                .to_string();
            let rank = c.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(format_err("checkpoint", format!("rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut len = 1usize;
            for _ in 0..rank {
                let d = usize::try_from(c.u64()?).map_err(|_| format_err("checkpoint", "dimension overflow"))?;
                len = len
                    .checked_mul(d)
                    .filter(|&l| l <= c.remaining() / 8)
                    .ok_or_else(|| format_err("checkpoint", format!("{name} larger than the file")))?;
                shape.push(d);
            }
            let raw = c.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| format_err("checkpoint", format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        if c.remaining() != 0 {
            return Err(format_err("checkpoint", format!("{} trailing bytes", c.remaining())));
        }
        Ok(Self { header, entries })
    }

    /// Rebuilds a model; names and shapes must match the configured layout exactly.
    pub fn into_model(self) -> Result<Lgcn> {
        let mut model = Lgcn::new(self.header.model.clone(), 0)?;
        let expected: Vec<(String, Vec<usize>)> = named(&model, "")
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != self.entries.len() {
            return Err(format_err(
                "checkpoint",
                format!("{} entries, model needs {}", self.entries.len(), expected.len()),
            ));
        }
        for ((n, s), (name, t)) in expected.iter().zip(&self.entries) {
            if n != name || s.as_slice() != t.shape() {
                return Err(format_err(
                    "checkpoint",
                    format!("entry {name} {:?} where {n} {s:?} was expected", t.shape()),
                ));
            }
        }
        let mut it = self.entries.into_iter();
        model.visit_mut("", &mut |_, t| *t = it.next().expect("length checked").1);
        Ok(model)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Architecture;

    #[test]
    fn model_round_trip() {
        let m = Lgcn::new(ModelConfig::micro(), 3).unwrap();
        let bytes = Checkpoint::from_model(&m, "epoch 0").encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.header.note, "epoch 0");
        let m2 = back.into_model().unwrap();
        assert_eq!(named(&m, ""), named(&m2, ""));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let m = Lgcn::new(ModelConfig::micro(), 3).unwrap();
        let mut ck = Checkpoint::from_model(&m, "");
        ck.header.model = ck.header.model.with_arch(Architecture::baseline());
        assert!(ck.into_model().is_err());
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let m = Lgcn::new(ModelConfig::micro(), 3).unwrap();
        let bytes = Checkpoint::from_model(&m, "").encode();
        for cut in [0, 7, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
