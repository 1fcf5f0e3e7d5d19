use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ffn_hidden, AttentionConfig, ModelConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear_slots(out: &mut Vec<Slot>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(Slot {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Glorot { fan_in, fan_out },
    });
    out.push(Slot {
        name: format!("{prefix}.bias"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn norm_slots(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    out.push(Slot {
        name: format!("{prefix}.gain"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(Slot {
        name: format!("{prefix}.bias"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn encoder_slots(out: &mut Vec<Slot>, prefix: &str, att: &AttentionConfig, ffn: usize) {
    let (d, inner) = (att.model_dim, att.inner_dim());
    norm_slots(out, &format!("{prefix}.ln1"), d);
    for p in ["q", "k", "v"] {
        linear_slots(out, &format!("{prefix}.attn.{p}"), d, inner);
    }
    linear_slots(out, &format!("{prefix}.attn.o"), inner, d);
    if ffn > 0 {
        norm_slots(out, &format!("{prefix}.ln2"), d);
        linear_slots(out, &format!("{prefix}.ffn.fc1"), d, ffn);
        linear_slots(out, &format!("{prefix}.ffn.fc2"), ffn, d);
    }
}

fn layout(cfg: &ModelConfig) -> Result<Vec<Slot>> {
    cfg.validate()?;
    let mut out = Vec::new();
    match cfg {
        ModelConfig::Seq2one(c) => {
            let d = c.attention.model_dim;
            let ffn = ffn_hidden(c.ffn_expansion, d)?;
            linear_slots(&mut out, "embed", c.n_roi, d);
            for l in 0..c.n_layers {
                encoder_slots(&mut out, &format!("layer{l}"), &c.attention, ffn);
            }
            linear_slots(&mut out, "head", d, c.n_outputs);
        }
        ModelConfig::Seq2seq(c) => {
            let ffn = ffn_hidden(c.ffn_expansion, c.feature_dim)?;
            linear_slots(&mut out, "embed", c.n_roi, c.feature_dim);
            for b in 0..c.block_windows.len() {
                encoder_slots(&mut out, &format!("block{b}"), &c.attention, ffn);
            }
            linear_slots(&mut out, "head", c.feature_dim, c.n_outputs);
        }
    }
    Ok(out)
}

/// Named parameter tensors of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Parameters recorded on a tape, by name.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing model parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform projections, zero biases, unit layer-norm gains; the
    /// draw order follows the layer order, so a seed fixes every value.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for slot in layout(cfg)? {
            let n: usize = slot.shape.iter().product();
            let data: Vec<T> = match slot.init {
                Init::Glorot { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n)
                        .map(|_| T::lit(rng.random_range(-limit..limit)))
                        .collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            let t = Tensor::new(slot.shape, data)?.with_grad();
            tensors.insert(slot.name, t);
        }
        Ok(Self { tensors })
    }

    /// Wraps existing tensors after checking names and shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let slots = layout(cfg)?;
        if slots.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors for {}, found {}",
                slots.len(),
                cfg.name(),
                tensors.len()
            )));
        }
        let mut tensors = tensors;
        for slot in &slots {
            let t = tensors
                .get_mut(&slot.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{}'", slot.name)))?;
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, config expects {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                )));
            }
            t.set_requires_grad(true);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }
}

/// Parameter count implied by a configuration, without allocating.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(layout(cfg)?
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum())
}
