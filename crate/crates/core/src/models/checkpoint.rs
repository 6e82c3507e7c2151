//! Binary checkpoints ("MMCK"), little-endian:
//!
//! ```text
//! magic "MMCK", u16 version (1), u32 epoch
//! u32 config length, model config as JSON
//! u8 rng count, per rng: 32-byte key, u64 stream, u128 word position
//! u32 tensor count, per tensor: u16 name length, name, u8 rank,
//!     rank × u32 extents, f64 values
//! u8 optimizer count, per optimizer: u64 step count, u32 parameter count,
//!     per parameter: u32 length, f64 first moments, f64 second moments
//! ```

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, Optimizers, TrainRngs};
use crate::error::{Error, Result};
use crate::optimizers::AdamState;
use crate::random::RngState;
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub config: ModelConfig,
    pub rngs: Vec<RngState>,
    pub tensors: Vec<SavedTensor>,
    pub optimizers: Vec<AdamState>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        model: &Model<T>,
        epoch: u32,
        rngs: Option<&TrainRngs>,
        opts: Option<&Optimizers<T>>,
    ) -> Self {
        Checkpoint {
            epoch,
            config: model.config.clone(),
            rngs: rngs.map(|r| r.states().to_vec()).unwrap_or_default(),
            tensors: model
                .params()
                .into_iter()
                .map(|p| SavedTensor {
                    name: p.name,
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                })
                .collect(),
            optimizers: opts
                .map(|o| o.all().iter().map(|a| a.state().clone()).collect())
                .unwrap_or_default(),
        }
    }

    /// Copies the saved tensors into `model` by name.
    pub fn apply<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        let params = model.params();
        if params.len() != self.tensors.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for p in params {
            let saved = self
                .tensors
                .iter()
                .find(|t| t.name == p.name)
                .ok_or_else(|| Error::Schema(format!("checkpoint lacks tensor {}", p.name)))?;
            if saved.shape != p.tensor.shape() {
                return Err(Error::Schema(format!(
                    "tensor {} has shape {:?} in checkpoint, {:?} in model",
                    p.name,
                    saved.shape,
                    p.tensor.shape()
                )));
            }
            let vals: Vec<T> = saved.values.iter().map(|&v| T::lit(v)).collect();
            p.tensor.set_data(&vals)?;
        }
        Ok(())
    }

    /// A fresh model with the saved configuration and weights.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let model = Model::new(self.config.clone(), 0)?;
        self.apply(&model)?;
        Ok(model)
    }

    pub fn restore_optimizers<T: Scalar>(&self, opts: &mut Optimizers<T>) -> Result<()> {
        let mut all = opts.all_mut();
        if all.len() != self.optimizers.len() {
            return Err(Error::Schema("optimizer count differs from checkpoint".into()));
        }
        for (o, s) in all.iter_mut().zip(&self.optimizers) {
            o.load_state(s.clone())?;
        }
        Ok(())
    }

    pub fn train_rngs(&self) -> Option<TrainRngs> {
        let s: [RngState; 3] = self.rngs.clone().try_into().ok()?;
        Some(TrainRngs::from_states(&s))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.push(self.rngs.len() as u8);
        for r in &self.rngs {
            out.extend_from_slice(&r.key);
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::Schema(format!("tensor name {} too long", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            t.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out.push(self.optimizers.len() as u8);
        for o in &self.optimizers {
            out.extend_from_slice(&o.step_count.to_le_bytes());
            out.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
            for (m, v) in o.m.iter().zip(&o.v) {
                out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                m.iter().chain(v).for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        if r.u16()? != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: "unsupported checkpoint version".into(),
            });
        }
        let epoch = r.u32()?;
        let cfg_len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(cfg_len)?)?;
        let rngs = (0..r.u8()?)
            .map(|_| {
                Ok(RngState {
                    key: r.take(32)?.try_into().unwrap(),
                    stream: r.u64()?,
                    word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
                })
            })
            .collect::<Result<_>>()?;
        let tensors = (0..r.u32()?)
            .map(|_| {
                let name_len = r.u16()? as usize;
                let at = r.pos;
                let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
                    offset: at as u64,
                    msg: "tensor name is not UTF-8".into(),
                })?;
                let rank = r.u8()? as usize;
                let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
                let values = r.f64s(shape.iter().product())?;
                Ok(SavedTensor { name, shape, values })
            })
            .collect::<Result<_>>()?;
        let optimizers = (0..r.u8()?)
            .map(|_| {
                let step_count = r.u64()?;
                let n = r.u32()? as usize;
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    m.push(r.f64s(len)?);
                    v.push(r.f64s(len)?);
                }
                Ok(AdamState { step_count, m, v })
            })
            .collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Checkpoint {
            epoch,
            config,
            rngs,
            tensors,
            optimizers,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated checkpoint: {n} bytes needed"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            msg: "tensor too large".into(),
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
