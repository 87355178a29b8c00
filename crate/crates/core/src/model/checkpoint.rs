//! Checkpoint container: the magic `PLCKPT01`, a little-endian `u64` header
//! length, a JSON header and the parameter data as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{RngState, TrainConfig, TrainOutput};
use super::{ModelConfig, Params, PoseModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PLCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the data section, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    iteration: usize,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PoseModel,
    pub train_config: TrainConfig,
    pub iteration: usize,
    pub rng: RngState,
}

impl From<TrainOutput> for Checkpoint {
    fn from(o: TrainOutput) -> Self {
        Checkpoint { model: o.model, train_config: o.train_config, iteration: o.iteration, rng: o.rng }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .model
            .params
            .names
            .iter()
            .zip(&self.model.params.tensors)
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: [t.nrows(), t.ncols()], offset };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            iteration: self.iteration,
            rng: self.rng,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.model.params.tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.model_config.validate()?;
        let data = &bytes[16 + len..];
        let mut params = Params { names: Vec::new(), tensors: Vec::new() };
        for e in &header.tensors {
            let count = e.shape[0] * e.shape[1];
            let raw = data
                .get(e.offset * 8..(e.offset + count) * 8)
                .ok_or_else(|| Error::Checkpoint(format!("{}: data truncated", e.name)))?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::from_shape_vec((e.shape[0], e.shape[1]), values).map_err(|err| Error::Checkpoint(err.to_string()))?;
            params.names.push(e.name.clone());
            params.tensors.push(t);
        }
        let model = PoseModel::from_params(header.model_config, params)?;
        Ok(Checkpoint { model, train_config: header.train_config, iteration: header.iteration, rng: header.rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
