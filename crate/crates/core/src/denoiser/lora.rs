//! Low-rank adapters `W + (α/r)·A·B` with `B` zero-initialized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamSet, Tensor};
use super::DenoiserConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub rank: usize,
    pub alpha: f64,
    /// `{target}.a` is `in × r`, `{target}.b` is `r × out`.
    pub params: ParamSet,
}

/// Adapted weights with their `(in, out)` extents.
pub fn lora_targets(cfg: &DenoiserConfig) -> Vec<(String, usize, usize)> {
    let (w, h) = (cfg.width, cfg.mlp_hidden);
    let mut out = Vec::new();
    for l in 0..cfg.layers {
        for (name, i, o) in [("wq", w, w), ("wk", w, w), ("wv", w, w), ("wo", w, w), ("up", w, h), ("down", h, w)] {
            out.push((format!("l{l}.{name}"), i, o));
        }
    }
    out
}

impl LoraSet {
    pub fn new(cfg: &DenoiserConfig, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut params = ParamSet::default();
        for (name, i, o) in lora_targets(cfg) {
            params.insert(format!("{name}.a"), Tensor::randn(&[i, rank], 1.0 / (i as f64).sqrt(), rng));
            params.insert(format!("{name}.b"), Tensor::zeros(&[rank, o]));
        }
        Ok(Self { rank, alpha, params })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub(crate) fn pair(&self, target: &str) -> Option<(&Tensor, &Tensor)> {
        let a = self.params.tensors.get(&format!("{target}.a"))?;
        let b = self.params.tensors.get(&format!("{target}.b"))?;
        Some((a, b))
    }

    /// Checks adapter extents against the weights they adapt.
    pub fn check(&self, base: &ParamSet) -> Result<()> {
        for (name, t) in &self.params.tensors {
            let (target, part) = name
                .rsplit_once('.')
                .ok_or_else(|| Error::Invalid(format!("bad adapter name {name}")))?;
            let w = base.get(target)?;
            let ok = match part {
                "a" => t.shape == [w.shape[0], self.rank],
                "b" => t.shape == [self.rank, w.shape[1]],
                _ => false,
            };
            if !ok {
                return Err(Error::shape("attach_lora", &w.shape, &t.shape));
            }
        }
        Ok(())
    }
}
