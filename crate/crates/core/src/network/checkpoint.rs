//! Parameter checkpoint container.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "XDSEGCKP"
//! u32 LE    header length N
//! N bytes   UTF-8 JSON header
//!           {"format":1,"model":..,"config":{..},"norm":{..},
//!            "stats_ready":{block:bool},"tensors":[{"name":..,"shape":[..]}]}
//! payload   f32 little-endian values of every tensor, in header order
//! ```
//!
//! Batch-normalization running statistics are stored as ordinary tensors
//! named `<block>.running_mean` and `<block>.running_var`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvBlock, NetworkError, NormKind, ParamSet, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XDSEGCKP";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub config: serde_json::Value,
    pub stats_ready: BTreeMap<String, bool>,
    pub tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    model: String,
    config: serde_json::Value,
    norm: serde_json::Value,
    stats_ready: BTreeMap<String, bool>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn err(msg: impl Into<String>) -> NetworkError {
    NetworkError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub(crate) fn capture<T: Real>(
        model: &str,
        config: serde_json::Value,
        params: &ParamSet<T>,
        blocks: &[ConvBlock<T>],
    ) -> Self {
        let to_f32 = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let mut tensors: Vec<CheckpointTensor> = params
            .iter()
            .map(|(name, t)| CheckpointTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: to_f32(t.data()),
            })
            .collect();
        let mut stats_ready = BTreeMap::new();
        for b in blocks.iter().filter(|b| b.norm.kind == NormKind::Batch) {
            stats_ready.insert(b.name.clone(), b.stats_ready);
            for (suffix, v) in [("running_mean", &b.running_mean), ("running_var", &b.running_var)] {
                tensors.push(CheckpointTensor {
                    name: format!("{}.{suffix}", b.name),
                    shape: vec![v.len()],
                    data: to_f32(v),
                });
            }
        }
        Self {
            model: model.to_string(),
            config,
            stats_ready,
            tensors,
        }
    }

    pub(crate) fn expect_model(&self, model: &str) -> Result<()> {
        if self.model != model {
            return Err(err(format!("expected a {model} checkpoint, found {}", self.model)));
        }
        Ok(())
    }

    fn find(&self, name: &str, shape: &[usize]) -> Result<&CheckpointTensor> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| err(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(err(format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape)));
        }
        Ok(t)
    }

    pub(crate) fn restore<T: Real>(&self, params: &mut ParamSet<T>, blocks: &mut [ConvBlock<T>]) -> Result<()> {
        let names = params.names().to_vec();
        for (name, tensor) in names.iter().zip(params.tensors_mut()) {
            let src = self.find(name, tensor.shape())?;
            for (d, &s) in tensor.data_mut().iter_mut().zip(&src.data) {
                *d = T::lit(s as f64);
            }
        }
        for b in blocks.iter_mut().filter(|b| b.norm.kind == NormKind::Batch) {
            let n = b.running_mean.len();
            let mean = self.find(&format!("{}.running_mean", b.name), &[n])?;
            let var = self.find(&format!("{}.running_var", b.name), &[n])?;
            b.running_mean = mean.data.iter().map(|&v| T::lit(v as f64)).collect();
            b.running_var = var.data.iter().map(|&v| T::lit(v as f64)).collect();
            b.stats_ready = self.stats_ready.get(&b.name).copied().unwrap_or(false);
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor<f32>> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| Tensor::new(t.shape.clone(), t.data.clone()).expect("validated on load"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT,
            model: self.model.clone(),
            norm: self.config.get("norm").cloned().unwrap_or(serde_json::Value::Null),
            config: self.config.clone(),
            stats_ready: self.stats_ready.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(err("truncated before header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| err(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(err(format!("unsupported format {}", header.format)));
        }
        let mut payload = &body[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if entry.shape.contains(&0) || payload.len() < n * 4 {
                return Err(err(format!("payload too short for tensor {}", entry.name)));
            }
            let data = payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[n * 4..];
            tensors.push(CheckpointTensor {
                name: entry.name,
                shape: entry.shape,
                data,
            });
        }
        if !payload.is_empty() {
            return Err(err(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self {
            model: header.model,
            config: header.config,
            stats_ready: header.stats_ready,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
