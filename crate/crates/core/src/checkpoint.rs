//! Binary checkpoint format.
//!
//! ```text
//! "TDCK"  u32 version
//! u32 meta length, meta bytes (JSON: configs, step, rng state, Adam scalars)
//! u32 record count, then per record:
//!     u32 name length, name (UTF-8), u32 ndim, ndim × u32 dims, f32 data
//! ```
//!
//! All integers and floats are little-endian. Records hold the model
//! parameters by name, Adam moments as `adam.m.<name>` / `adam.v.<name>`,
//! and the feature normalizer as `normalizer.mean` / `normalizer.std`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alteration::AlterationConfig;
use crate::data::{write_atomic, Normalizer};
use crate::encoder::{Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, OptimizerState};
use crate::pretrain::TrainConfig;
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alteration: AlterationConfig,
    pub step: u64,
    pub rng: RngState,
    pub optimizer: OptimizerState,
    pub params: Vec<(String, Tensor<f32>)>,
    pub normalizer: Normalizer,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    alteration: AlterationConfig,
    step: u64,
    rng: RngState,
    adam: AdamConfig,
    adam_step: u64,
}

impl Checkpoint {
    pub fn encoder(&self) -> Result<Encoder<f32>> {
        let mut enc = Encoder::new(self.model.clone(), &mut Rng::seed(0))?;
        enc.params_mut().load_values(&self.params)?;
        Ok(enc)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            model: self.model.clone(),
            train: self.train.clone(),
            alteration: self.alteration.clone(),
            step: self.step,
            rng: self.rng.clone(),
            adam: self.optimizer.config,
            adam_step: self.optimizer.step,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, len_u32(meta.len())?);
        out.extend_from_slice(&meta);

        let moments = self.optimizer.first_moment.len();
        if moments != self.params.len() || self.optimizer.second_moment.len() != moments {
            return Err(Error::Usage("optimizer state does not match parameters".into()));
        }
        put_u32(&mut out, len_u32(3 * self.params.len() + 2)?);
        for (name, t) in &self.params {
            put_record(&mut out, name, t.shape(), t.data())?;
        }
        for (kind, moments) in [
            ("m", &self.optimizer.first_moment),
            ("v", &self.optimizer.second_moment),
        ] {
            for ((name, t), m) in self.params.iter().zip(moments) {
                put_record(&mut out, &format!("adam.{kind}.{name}"), t.shape(), m)?;
            }
        }
        let d = self.normalizer.mean.len();
        put_record(&mut out, "normalizer.mean", &[d], &self.normalizer.mean)?;
        put_record(&mut out, "normalizer.std", &[d], &self.normalizer.std)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let (mut first, mut second) = (Vec::new(), Vec::new());
        let (mut mean, mut std) = (None, None);
        for _ in 0..count {
            let (name, t) = r.record()?;
            if let Some(p) = name.strip_prefix("adam.m.") {
                first.push((p.to_string(), t.into_data()));
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                second.push((p.to_string(), t.into_data()));
            } else if name == "normalizer.mean" {
                mean = Some(t.into_data());
            } else if name == "normalizer.std" {
                std = Some(t.into_data());
            } else {
                params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint records".into()));
        }
        let order = |moments: Vec<(String, Vec<f32>)>| -> Result<Vec<Vec<f32>>> {
            if moments.len() != params.len() {
                return Err(Error::Data("optimizer moments do not match parameters".into()));
            }
            params
                .iter()
                .zip(moments)
                .map(|((p, t), (m, data))| {
                    if *p != m || data.len() != t.numel() {
                        Err(Error::Data(format!("optimizer moment {m} does not match {p}")))
                    } else {
                        Ok(data)
                    }
                })
                .collect()
        };
        let optimizer = OptimizerState {
            config: meta.adam,
            step: meta.adam_step,
            first_moment: order(first)?,
            second_moment: order(second)?,
        };
        let normalizer = match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Normalizer { mean, std },
            _ => return Err(Error::Data("checkpoint lacks a valid normalizer".into())),
        };
        Ok(Self {
            model: meta.model,
            train: meta.train,
            alteration: meta.alteration,
            step: meta.step,
            rng: meta.rng,
            optimizer,
            params,
            normalizer,
        })
    }

    /// Written to a temporary file and renamed, so a failure never leaves
    /// a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Usage(format!("length {n} does not fit in u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    put_u32(out, len_u32(name.len())?);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, len_u32(shape.len())?);
    for &d in shape {
        put_u32(out, len_u32(d)?);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Data("record name is not UTF-8".into()))?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = self
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}
