//! Numerical self-checks: finite differences over every registered op and
//! cached versus recomputed attention on a denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Binding, Bound, DenoiserConfig, Group, ParamSet, TokenRole};
use crate::diffnum::{finite_diff_check, registered_ops, Tape};
use crate::rng::{normal_frames, normal_vec};
use crate::Result;

pub const FD_TOL: f64 = 1e-5;
pub const KV_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    /// Worst relative gradient error per op.
    pub ops: Vec<(String, f64)>,
    /// Largest difference between cached and recomputed outputs.
    pub kv_max_diff: f64,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|(_, e)| *e < FD_TOL) && self.kv_max_diff < KV_TOL
    }
}

/// `points` random inputs per op.
pub fn fd_suite(points: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in registered_ops() {
        let n: usize = case.shape.iter().product();
        let mut worst = 0.0f64;
        for _ in 0..points {
            let p = normal_vec(&mut rng, n);
            worst = worst.max(finite_diff_check(&case.f, &p, &case.shape, 1e-5)?);
        }
        out.push((case.name.to_string(), worst));
    }
    Ok(out)
}

/// Three history chunks and a reflect chunk, then one noisy chunk through
/// the cache and through a grouped forward of the whole context.
pub fn kv_equivalence(cfg: &DenoiserConfig, params: &ParamSet, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d) = (cfg.chunk_frames, cfg.frame_dim);
    let n_hist = (cfg.max_frames / c).saturating_sub(1).min(3);
    let cond = normal_vec(&mut rng, cfg.cond_dim);
    let hist: Vec<_> = (0..n_hist).map(|_| normal_frames(&mut rng, c, d)).collect();
    let reflect = normal_frames(&mut rng, c, d);
    let noisy = normal_frames(&mut rng, c, d);
    let start = (n_hist * c) as i64;
    let mut worst = 0.0f64;
    for with_reflect in [false, true] {
        let mut tape = Tape::no_grad();
        let b = Bound::bind(&mut tape, cfg, Binding::frozen(params))?;
        let mut cache = b.init_cache(&mut tape, &cond)?;
        for (i, h) in hist.iter().enumerate() {
            b.append_history(&mut tape, &mut cache, h, (i * c) as i64)?;
        }
        if with_reflect {
            b.set_reflect(&mut tape, &mut cache, &reflect, start)?;
        }
        let xv = tape.constant(noisy.data.clone(), &[c, d])?;
        let cached = b.forward_chunk(&mut tape, &cache, xv, 0.8, start)?;
        let cached = tape.value(cached).to_vec();
        let mut groups = Vec::new();
        for (i, h) in hist.iter().enumerate() {
            groups.push(Group {
                x: tape.constant(h.data.clone(), &[c, d])?,
                sigma: 0.0,
                role: TokenRole::History,
                start: (i * c) as i64,
                sees: (0..i).collect(),
            });
        }
        if with_reflect {
            groups.push(Group {
                x: tape.constant(reflect.data.clone(), &[c, d])?,
                sigma: 0.0,
                role: TokenRole::Reflect,
                start,
                sees: (0..n_hist).collect(),
            });
        }
        let n_prev = groups.len();
        groups.push(Group {
            x: xv,
            sigma: 0.8,
            role: TokenRole::Noisy,
            start,
            sees: (0..n_prev).collect(),
        });
        let outs = b.forward_grouped(&mut tape, &cond, &groups)?;
        let full = tape.value(*outs.last().expect("noisy group")).to_vec();
        worst = cached.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

/// Both checks; `params` defaults to a fresh initialisation.
pub fn run(cfg: &DenoiserConfig, params: Option<&ParamSet>, seed: u64) -> Result<SelfCheck> {
    let fresh;
    let params = match params {
        Some(p) => p,
        None => {
            fresh = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(seed))?;
            &fresh
        }
    };
    Ok(SelfCheck {
        ops: fd_suite(100, seed)?,
        kv_max_diff: kv_equivalence(cfg, params, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_passes_selfcheck() {
        let r = run(&DenoiserConfig::default(), None, 3).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(!r.ops.is_empty());
    }
}
