//! SCVF checkpoint files.
//!
//! Layout (little-endian): `"SCVF"`, `u32` version, `u32` length + canonical
//! run-config JSON, `u32` epoch, four `u64` PRNG state words, `u32` tensor
//! count, then per tensor: `u32` name length + UTF-8 name, `u8` dtype
//! (0 = f32, 1 = f64), `u32` rank, `rank × u32` extents, values.

use std::path::Path;

use crate::config::{Precision, RunSpec};
use crate::data::Reader;
use crate::error::{FormatError, Result};
use crate::model::{ModelState, NamedTensor};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCVF";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: RunSpec,
    pub state: ModelState,
    /// Number of completed epochs.
    pub epoch: u32,
    pub rng_state: [u64; 4],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = self.spec.canonical_json();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for w in self.rng_state {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.state.tensors.len() as u32).to_le_bytes());
        let dtype = match self.spec.model.precision {
            Precision::F32 => DTYPE_F32,
            Precision::F64 => DTYPE_F64,
        };
        for nt in &self.state.tensors {
            out.extend_from_slice(&(nt.name.len() as u32).to_le_bytes());
            out.extend_from_slice(nt.name.as_bytes());
            out.push(dtype);
            out.extend_from_slice(&(nt.tensor.shape().len() as u32).to_le_bytes());
            for &s in nt.tensor.shape() {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            for &v in nt.tensor.data() {
                match dtype {
                    DTYPE_F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    _ => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(FormatError::BadMagic { expected: "SCVF" }.into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            }
            .into());
        }
        let json_len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|e| FormatError::Malformed(format!("config is not utf-8: {e}")))?;
        let spec = RunSpec::from_json(json)?;
        let epoch = r.u32()?;
        let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| FormatError::Malformed(format!("tensor name is not utf-8: {e}")))?;
            let dtype = r.u8()?;
            let width = match dtype {
                DTYPE_F32 => 4,
                DTYPE_F64 => 8,
                other => return Err(FormatError::Malformed(format!("unknown dtype {other}")).into()),
            };
            let rank = r.u32()? as usize;
            if rank == 0 || rank > crate::tensor::MAX_RANK {
                return Err(FormatError::Malformed(format!("tensor {name} has rank {rank}")).into());
            }
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(width).ok_or_else(|| FormatError::Malformed("tensor too large".into()))?)?;
            let data: Vec<f64> = if dtype == DTYPE_F32 {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            };
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::new(&shape, data)?,
            });
        }
        r.finish()?;
        let state = ModelState::from_tensors(&spec.model, tensors)?;
        Ok(Self {
            spec,
            state,
            epoch,
            rng_state,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
