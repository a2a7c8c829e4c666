//! Checkpoint container.
//!
//! Layout: `"DODCKPT1"`, `u32` format version, `u32` metadata length, JSON
//! metadata (configs, step, tensor names and shapes, sampler state), then
//! little-endian `f32` buffers: all parameters, all first moments, all
//! second moments, each in metadata order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use transdod_tensor::Tensor;

use super::optim::{AdamState, AdamW};
use super::TrainConfig;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DODCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    train: TrainConfig,
    optimizer: AdamW,
    step: u64,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
    rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub optimizer: AdamW,
    pub step: u64,
    pub names: Vec<String>,
    pub params: Vec<Tensor<f32>>,
    pub adam: AdamState<f32>,
    pub rng: RngState,
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            model: self.model.clone(),
            train: self.train.clone(),
            optimizer: self.optimizer,
            step: self.step,
            adam_step: self.adam.step,
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            push_f32s(&mut out, p.data());
        }
        for m in &self.adam.m {
            push_f32s(&mut out, m);
        }
        for v in &self.adam.v {
            push_f32s(&mut out, v);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(8, format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::format(12, format!("metadata length {len} exceeds file")))?;
        let meta: Metadata = serde_json::from_slice(json).map_err(|e| Error::format(16, format!("metadata: {e}")))?;
        let sizes: Vec<usize> = meta.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let total: usize = sizes.iter().sum();
        let body = &bytes[16 + len..];
        if body.len() != 3 * 4 * total {
            return Err(Error::format(
                (16 + len) as u64,
                format!("expected {} buffer bytes, found {}", 12 * total, body.len()),
            ));
        }
        let floats: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut at = 0;
        let mut take = |n: usize| {
            let v = floats[at..at + n].to_vec();
            at += n;
            v
        };
        let params = meta
            .tensors
            .iter()
            .zip(&sizes)
            .map(|(t, &n)| Tensor::new(t.shape.clone(), take(n)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let m = sizes.iter().map(|&n| take(n)).collect();
        let v = sizes.iter().map(|&n| take(n)).collect();
        Ok(Self {
            model: meta.model,
            train: meta.train,
            optimizer: meta.optimizer,
            step: meta.step,
            names: meta.tensors.into_iter().map(|t| t.name).collect(),
            params,
            adam: AdamState {
                step: meta.adam_step,
                m,
                v,
            },
            rng: meta.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
