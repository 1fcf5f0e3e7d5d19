//! Checkpoint container: `PHYSRCK1`, a little-endian u64 header length, a
//! JSON header, then little-endian f32 blocks at the offsets it lists.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Adam;
use super::Task;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelParams};
use crate::scalar::Real;

const MAGIC: &[u8; 8] = b"PHYSRCK1";

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: String,
    pub fold: Option<usize>,
    pub task: Task,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub initial_val_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub initial_lr: f64,
    /// Parameter hash of the weights training started from.
    pub init_param_hash: String,
    /// Hash over the content hashes of the training and validation scans.
    pub training_data_hash: String,
    pub prep_settings_hash: String,
    /// Wall-clock creation time; the only non-deterministic field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Block {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
    m: Vec<Block>,
    v: Vec<Block>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    provenance: Provenance,
    params: Vec<Block>,
    optimizer: Option<OptimizerHeader>,
    data_bytes: usize,
}

/// SHA-256 over parameter names, shapes and f32 little-endian values, in
/// name order. Parameters held in f64 are rounded to f32 first, so the hash
/// matches the stored checkpoint.
pub fn param_hash<T: Real>(params: &ModelParams<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn push_block(data: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) -> Block {
    let offset = data.len();
    for v in values {
        data.extend_from_slice(&v.to_le_bytes());
    }
    Block {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset,
    }
}

impl Checkpoint {
    pub fn param_hash(&self) -> String {
        param_hash(&self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let params = self
            .params
            .iter()
            .map(|(n, t)| push_block(&mut data, n, t.shape(), t.data()))
            .collect();
        let optimizer = self.optimizer.as_ref().map(|opt| {
            let shape_of = |n: &str| self.params.get(n).map(|t| t.shape().to_vec());
            let mut blocks = |moments: &BTreeMap<String, Vec<f32>>| -> Vec<Block> {
                moments
                    .iter()
                    .map(|(n, v)| {
                        let shape = shape_of(n).unwrap_or_else(|| vec![v.len()]);
                        push_block(&mut data, n, &shape, v)
                    })
                    .collect()
            };
            let m = blocks(&opt.m);
            let v = blocks(&opt.v);
            OptimizerHeader {
                beta1: opt.beta1,
                beta2: opt.beta2,
                epsilon: opt.epsilon,
                t: opt.t,
                m,
                v,
            }
        });
        let header = Header {
            format_version: 1,
            model: self.model.clone(),
            provenance: self.provenance.clone(),
            params,
            optimizer,
            data_bytes: data.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file size")));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != 1 {
            return Err(bad(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let data = &body[hlen..];
        if data.len() != header.data_bytes {
            return Err(bad(format!(
                "data section has {} bytes, header declares {}",
                data.len(),
                header.data_bytes
            )));
        }
        let read = |b: &Block| -> Result<Vec<f32>> {
            let n: usize = b.shape.iter().product();
            let end = b.offset.checked_add(n * 4).filter(|&e| e <= data.len());
            let end = end
                .ok_or_else(|| bad(format!("block '{}' runs past the end of the file", b.name)))?;
            Ok(data[b.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let mut tensors = BTreeMap::new();
        for b in &header.params {
            let t = Tensor::new(b.shape.clone(), read(b)?)?;
            if tensors.insert(b.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate parameter '{}'", b.name)));
            }
        }
        header
            .model
            .validate()
            .map_err(|e| bad(format!("model config: {e}")))?;
        let params = ModelParams::from_tensors(&header.model, tensors)?;
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let moments = |blocks: &[Block]| -> Result<BTreeMap<String, Vec<f32>>> {
                    blocks
                        .iter()
                        .map(|b| Ok((b.name.clone(), read(b)?)))
                        .collect()
                };
                Some(Adam {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    epsilon: o.epsilon,
                    t: o.t,
                    m: moments(&o.m)?,
                    v: moments(&o.v)?,
                })
            }
        };
        Ok(Self {
            model: header.model,
            params,
            optimizer,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_stage(path.display().to_string()))
    }
}
