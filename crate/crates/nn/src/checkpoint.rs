//! Self-describing checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "UNSHCKPT"
//! version   u32
//! json_len  u64, then json_len bytes of UTF-8 JSON metadata
//! count     u64, then `count` tensor records:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   payload  prod(dims) f32 values, row-major
//! ```
//!
//! Network parameters are named `<net>.<layer>...`; optimizer moments are
//! stored alongside as `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use unshadow_core::util::write_atomic;

use crate::adam::{Adam, AdamConfig, Moments};
use crate::error::{NnError, Result};
use crate::pipeline::{ModelConfig, PipelineState};
use crate::tensor::device;
use crate::train::Stage;
use crate::unet::UNetConfig;

pub const MAGIC: &[u8; 8] = b"UNSHCKPT";
pub const VERSION: u32 = 1;

/// Where a training run stands, enough to continue it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub stage: Stage,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub train_config_hash: String,
    pub adam: AdamConfig,
    pub adam_t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub networks: Vec<UNetConfig>,
    pub norm_version: String,
    pub training: Option<TrainProgress>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorRecord>,
}

fn record(name: String, t: &Tensor) -> Result<TensorRecord> {
    Ok(TensorRecord {
        name,
        dims: t.dims().to_vec(),
        data: t.flatten_all()?.to_vec1()?,
    })
}

impl Checkpoint {
    pub fn from_state(state: &PipelineState, training: Option<(TrainProgress, &Adam)>) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        for (name, var) in state.named_vars() {
            tensors.push(record(name, var.as_tensor())?);
        }
        let progress = match training {
            Some((progress, adam)) => {
                for (name, mom) in adam.moments() {
                    tensors.push(record(format!("adam.m.{name}"), &mom.m)?);
                    tensors.push(record(format!("adam.v.{name}"), &mom.v)?);
                }
                Some(progress)
            }
            None => None,
        };
        Ok(Checkpoint {
            meta: CheckpointMeta {
                model: state.config.clone(),
                networks: state.configs(),
                norm_version: state.norm_version.clone(),
                training: progress,
            },
            tensors,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(NnError::checkpoint(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::checkpoint(path, format!("unsupported checkpoint version {version}")));
        }
        let json_len = r.len()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(json_len)?).map_err(|e| NnError::checkpoint(path, format!("metadata: {e}")))?;
        let count = r.len()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| NnError::checkpoint(path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.len()?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| NnError::checkpoint(path, format!("tensor {name}: size overflow")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(TensorRecord { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(NnError::checkpoint(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))?;
        }
        write_atomic(path, &self.encode()?).map_err(|e| NnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| NnError::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }

    fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn to_tensor(rec: &TensorRecord) -> Result<Tensor> {
        Ok(Tensor::from_vec(rec.data.clone(), rec.dims.as_slice(), &device())?)
    }

    /// Rebuilds the networks, checking every parameter's presence and shape.
    pub fn to_state(&self, path: &Path) -> Result<PipelineState> {
        let state = PipelineState::new(&self.meta.model)?;
        if state.configs() != self.meta.networks {
            return Err(NnError::checkpoint(path, "network configurations do not match the model config"));
        }
        let mut state = state;
        state.norm_version = self.meta.norm_version.clone();
        for (name, var) in state.named_vars() {
            let rec = self
                .tensor(&name)
                .ok_or_else(|| NnError::checkpoint(path, format!("missing parameter {name}")))?;
            if rec.dims != var.dims() {
                return Err(NnError::checkpoint(path, format!("parameter {name}: shape {:?}, expected {:?}", rec.dims, var.dims())));
            }
            var.set(&Self::to_tensor(rec)?)?;
        }
        Ok(state)
    }

    /// Restores the optimizer over `vars` from the stored moments.
    pub fn to_adam(&self, vars: &[(String, &candle_core::Var)], path: &Path) -> Result<Option<Adam>> {
        let Some(p) = &self.meta.training else {
            return Ok(None);
        };
        let mut moments = Vec::with_capacity(vars.len());
        for (name, _) in vars {
            let get = |kind: &str| -> Result<Tensor> {
                let key = format!("adam.{kind}.{name}");
                Self::to_tensor(self.tensor(&key).ok_or_else(|| NnError::checkpoint(path, format!("missing {key}")))?)
            };
            moments.push((name.clone(), Moments { m: get("m")?, v: get("v")? }));
        }
        Adam::from_parts(p.adam.clone(), p.adam_t, vars, moments)
            .map(Some)
            .map_err(|e| NnError::checkpoint(path, e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NnError::checkpoint(self.path, format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn len(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| NnError::checkpoint(self.path, format!("length {v} out of range")))
    }
}
