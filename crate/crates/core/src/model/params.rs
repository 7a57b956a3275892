use std::collections::BTreeMap;

use super::{ConditioningMode, DenoiserConfig};
use crate::error::{shape_err, Error, Result};
use crate::rng::{normal_vec_f32, stream, Purpose, StreamRng};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
///
/// Initialization: weights `N(0, gain²/fan_in)`, biases zero, norm gains one,
/// output projection zero so the untrained model predicts `v̂ = 0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor<f32>>,
}

struct Init {
    rng: StreamRng,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl Init {
    fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> Result<()> {
        let n = shape.iter().product();
        let data = normal_vec_f32(&mut self.rng, n)
            .into_iter()
            .map(|v| v * std)
            .collect();
        self.tensors
            .insert(name.to_string(), Tensor::new(shape, data)?);
        Ok(())
    }

    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f32) -> Result<()> {
        self.normal(name, &[fan_in, fan_out], gain / (fan_in as f32).sqrt())
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f32) -> Result<()> {
        self.tensors
            .insert(name.to_string(), Tensor::full(shape, v)?);
        Ok(())
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f32) -> Result<()> {
        self.weight(&format!("{name}.w"), fan_in, fan_out, gain)?;
        self.fill(&format!("{name}.b"), &[fan_out], 0.0)
    }
}

pub(crate) fn block_prefix(i: usize) -> String {
    format!("blocks.{i:02}")
}

impl Params {
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut it = Init {
            rng: stream(seed, Purpose::Init, 0),
            tensors: BTreeMap::new(),
        };
        let (d, e, dc) = (cfg.d_model, cfg.time_dim, cfg.context_dim);
        it.linear("patch", cfg.patch_dim(), d, 1.0)?;
        it.normal("pos", &[cfg.num_patches(), d], 0.1)?;
        it.linear("time.fc1", d, e, 1.0)?;
        it.linear("time.fc2", e, e, 1.0)?;
        match cfg.mode {
            ConditioningMode::CrossAttention => {
                it.normal("null.tokens", &[cfg.context_tokens, dc], 1.0)?
            }
            ConditioningMode::Film => {
                it.linear("film", dc, e, 1.0)?;
                it.normal("null.cls", &[dc], 1.0)?;
            }
            ConditioningMode::None => {}
        }
        for i in 0..cfg.num_blocks {
            let p = block_prefix(i);
            it.linear(&format!("{p}.mod"), e, 4 * d, 0.1)?;
            it.linear(&format!("{p}.attn.qkv"), d, 3 * d, 1.0)?;
            it.linear(&format!("{p}.attn.out"), d, d, 1.0)?;
            if cfg.mode == ConditioningMode::CrossAttention {
                it.fill(&format!("{p}.xattn.norm.g"), &[d], 1.0)?;
                it.fill(&format!("{p}.xattn.norm.b"), &[d], 0.0)?;
                it.linear(&format!("{p}.xattn.q"), d, d, 1.0)?;
                it.linear(&format!("{p}.xattn.kv"), dc, 2 * d, 1.0)?;
                it.linear(&format!("{p}.xattn.out"), d, d, 1.0)?;
            }
            it.linear(&format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, 1.0)?;
            it.linear(&format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, 1.0)?;
        }
        it.fill("final.norm.g", &[d], 1.0)?;
        it.fill("final.norm.b", &[d], 0.0)?;
        it.fill("out.w", &[d, cfg.patch_dim()], 0.0)?;
        it.fill("out.b", &[cfg.patch_dim()], 0.0)?;
        Ok(Self {
            tensors: it.tensors,
        })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<f32>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), Tensor::zeros(v.shape())?)))
            .collect::<Result<_>>()?;
        Ok(Self { tensors })
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &Params) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(shape_err!(
                "parameter sets have {} and {} tensors",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(shape_err!(
                    "parameter {ka} {:?} vs {kb} {:?}",
                    va.shape(),
                    vb.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<f32>> {
        self.tensors
    }
}
