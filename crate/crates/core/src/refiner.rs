//! Noise refiner: the denoiser architecture with its own adapters and a
//! zero-initialized output head, mapping a sampled noise to a residual.
//!
//! The refiner keeps its own [`KVCache`]. Its layout is the condition
//! prefix, the clean history (unless ablated) and, while a step is being
//! refined, a reflect block holding the previous clean prediction at the
//! very positions of the noise tokens.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Binding, Bound, DenoiserConfig, KVCache, LoraSet, ParamSet, Tensor};
use crate::diffnum::{Tape, Var};
use crate::error::{Error, Result};
use crate::frames::Frames;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerParams {
    pub lora: LoraSet,
    pub head: ParamSet,
}

impl RefinerParams {
    pub fn new(cfg: &DenoiserConfig, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            lora: LoraSet::new(cfg, rank, alpha, rng)?,
            head: cfg.zero_head(),
        })
    }

    pub fn binding<'a>(&'a self, base: &'a ParamSet, trainable: bool) -> Binding<'a> {
        Binding {
            base,
            base_trainable: false,
            lora: Some((&self.lora, trainable)),
            head: Some((&self.head, trainable)),
        }
    }

    /// Trainable tensors under the names used by [`Bound::trainable`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .lora
            .params
            .tensors
            .iter_mut()
            .map(|(k, v)| (format!("lora.{k}"), v))
            .collect();
        out.extend(self.head.tensors.iter_mut().map(|(k, v)| (format!("head.{k}"), v)));
        out
    }

    pub fn hash(&self) -> u32 {
        let mut all = self.lora.params.with_prefix("lora");
        all.tensors.extend(self.head.with_prefix("head").tensors);
        all.hash()
    }
}

/// Which cache blocks the refiner sees and which steps it refines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineFlags {
    pub history: bool,
    pub reflect: bool,
    /// Step indices `j` (1 = last) eligible for refinement; `None` = all.
    pub steps: Option<BTreeSet<usize>>,
}

impl Default for RefineFlags {
    fn default() -> Self {
        Self {
            history: true,
            reflect: true,
            steps: None,
        }
    }
}

impl RefineFlags {
    pub fn refines(&self, j: usize) -> bool {
        self.steps.as_ref().is_none_or(|s| s.contains(&j))
    }
}

/// The refiner's attention context for one `(chunk, step)`.
pub struct ReflectiveContext<'a> {
    pub cache: &'a KVCache,
    pub sigma: f64,
    pub start: i64,
}

impl<'a> ReflectiveContext<'a> {
    /// Rebuilds the reflect block of `cache` from `reflect` (or drops it
    /// when `None`) and returns the context for this step.
    pub fn build(
        tape: &mut Tape,
        bound: &Bound,
        cache: &'a mut KVCache,
        reflect: Option<&Frames>,
        sigma: f64,
        start: i64,
    ) -> Result<Self> {
        match reflect {
            Some(r) => bound.set_reflect(tape, cache, r, start)?,
            None => cache.clear_reflect(),
        }
        Ok(Self {
            cache: &*cache,
            sigma,
            start,
        })
    }
}

/// `Δε = T_φ(ε; context)`. Fails when `require_reflect` is set and the
/// context carries no reflect block.
pub fn refine(tape: &mut Tape, bound: &Bound, eps: Var, ctx: &ReflectiveContext<'_>, require_reflect: bool) -> Result<Var> {
    if require_reflect && !ctx.cache.has_reflect() {
        return Err(Error::Invalid("refiner context is missing its reflect block".into()));
    }
    bound.forward_chunk(tape, ctx.cache, eps, ctx.sigma, ctx.start)
}

/// `½‖Δε‖²`.
pub fn regularizer(tape: &mut Tape, delta: Var) -> Result<Var> {
    let s = tape.sq_norm(delta)?;
    Ok(tape.scale(s, 0.5)?)
}

pub fn regularizer_value(delta: &[f64]) -> f64 {
    0.5 * delta.iter().map(|v| v * v).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_frames;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_kl_mean_shift(mu: &[f64]) -> f64 {
        // KL(N(μ, I) ‖ N(0, I)) = ½(tr I + μᵀμ − k − ln det I)
        let k = mu.len() as f64;
        0.5 * (k + mu.iter().map(|v| v * v).sum::<f64>() - k - 0.0)
    }

    #[test]
    fn regularizer_closed_forms() {
        assert_eq!(regularizer_value(&[0.0; 5]), 0.0);
        assert_eq!(regularizer_value(&[1.0; 7]), 3.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let d = crate::rng::normal_vec(&mut rng, 24);
            assert!((regularizer_value(&d) - gaussian_kl_mean_shift(&d)).abs() <= 1e-15 * regularizer_value(&d).max(1.0));
        }
        let mut t = Tape::new();
        let v = t.param(vec![1.0, -2.0], &[1, 2]).unwrap();
        let r = regularizer(&mut t, v).unwrap();
        assert_eq!(t.scalar(r), 2.5);
        assert_eq!(t.backward(r).unwrap().get(v), vec![1.0, -2.0]);
    }

    fn setup() -> (DenoiserConfig, ParamSet, RefinerParams, Vec<f64>) {
        let cfg = DenoiserConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = cfg.init_params(&mut rng).unwrap();
        let r = RefinerParams::new(&cfg, 4, 4.0, &mut rng).unwrap();
        let cond: Vec<f64> = (0..cfg.cond_dim).map(|i| (i as f64 * 0.3).cos()).collect();
        (cfg, base, r, cond)
    }

    #[test]
    fn fresh_refiner_outputs_exact_zero() {
        let (cfg, base, r, cond) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::no_grad();
        let b = Bound::bind(&mut tape, &cfg, r.binding(&base, false)).unwrap();
        let mut cache = b.init_cache(&mut tape, &cond).unwrap();
        b.append_history(&mut tape, &mut cache, &normal_frames(&mut rng, 3, 8), 0).unwrap();
        let refl = normal_frames(&mut rng, 3, 8);
        let ctx = ReflectiveContext::build(&mut tape, &b, &mut cache, Some(&refl), 0.8, 3).unwrap();
        let eps = tape.constant(normal_frames(&mut rng, 3, 8).data, &[3, 8]).unwrap();
        let d = refine(&mut tape, &b, eps, &ctx, true).unwrap();
        assert!(tape.value(d).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_reflect_block_is_an_error() {
        let (cfg, base, r, cond) = setup();
        let mut tape = Tape::no_grad();
        let b = Bound::bind(&mut tape, &cfg, r.binding(&base, false)).unwrap();
        let mut cache = b.init_cache(&mut tape, &cond).unwrap();
        let ctx = ReflectiveContext::build(&mut tape, &b, &mut cache, None, 0.8, 0).unwrap();
        let eps = tape.constant(vec![0.1; 24], &[3, 8]).unwrap();
        assert!(refine(&mut tape, &b, eps, &ctx, true).is_err());
        assert!(refine(&mut tape, &b, eps, &ctx, false).is_ok());
    }

    #[test]
    fn reflect_block_shares_noise_positions() {
        let (cfg, base, r, cond) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::no_grad();
        let b = Bound::bind(&mut tape, &cfg, r.binding(&base, false)).unwrap();
        let mut cache = b.init_cache(&mut tape, &cond).unwrap();
        b.append_history(&mut tape, &mut cache, &normal_frames(&mut rng, 3, 8), 0).unwrap();
        let refl = normal_frames(&mut rng, 3, 8);
        let ctx = ReflectiveContext::build(&mut tape, &b, &mut cache, Some(&refl), 0.5, 3).unwrap();
        let reflect_pos: Vec<i64> = ctx
            .cache
            .entries()
            .iter()
            .filter(|e| e.1 == crate::denoiser::TokenRole::Reflect)
            .map(|e| e.0)
            .collect();
        assert_eq!(reflect_pos, vec![3, 4, 5]);
    }

    /// Swapping two frames of both the noise and the reflect block, with
    /// their positions, swaps the corresponding residual rows.
    #[test]
    fn joint_frame_permutation_is_equivariant() {
        let (cfg, base, mut r, cond) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in r.head.tensors.values_mut() {
            t.data = crate::rng::normal_vec(&mut rng, t.data.len());
        }
        let eps = normal_frames(&mut rng, 3, 8);
        let refl = normal_frames(&mut rng, 3, 8);
        let swap = |f: &Frames| {
            let mut g = f.clone();
            g.row_mut(0).copy_from_slice(f.row(2));
            g.row_mut(2).copy_from_slice(f.row(0));
            g
        };
        // One frame per group lets each frame carry its own position.
        let run = |eps: &Frames, refl: &Frames, pos: [i64; 3]| -> Vec<Vec<f64>> {
            let mut tape = Tape::no_grad();
            let b = Bound::bind(&mut tape, &cfg, r.binding(&base, false)).unwrap();
            let mut groups = Vec::new();
            for (k, &p) in pos.iter().enumerate() {
                groups.push(crate::denoiser::Group {
                    x: tape.constant(refl.row(k).to_vec(), &[1, 8]).unwrap(),
                    sigma: 0.0,
                    role: crate::denoiser::TokenRole::Reflect,
                    start: p,
                    sees: (0..3).collect(),
                });
            }
            for (k, &p) in pos.iter().enumerate() {
                groups.push(crate::denoiser::Group {
                    x: tape.constant(eps.row(k).to_vec(), &[1, 8]).unwrap(),
                    sigma: 0.7,
                    role: crate::denoiser::TokenRole::Noisy,
                    start: p,
                    sees: (0..6).collect(),
                });
            }
            let outs = b.forward_grouped(&mut tape, &cond, &groups).unwrap();
            outs[3..].iter().map(|v| tape.value(*v).to_vec()).collect()
        };
        let a = run(&eps, &refl, [0, 1, 2]);
        let b = run(&swap(&eps), &swap(&refl), [2, 1, 0]);
        for (k, kk) in [(0, 2), (1, 1), (2, 0)] {
            for (x, y) in a[k].iter().zip(&b[kk]) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
