//! Autoregressive chunk rollouts.
//!
//! Stochastic sampling denoises at σ = 1, then for every later step
//! re-noises the current clean estimate with a fresh draw and denoises
//! again; the last clean estimate becomes history. All draws of one
//! rollout form a [`NoiseRecord`], and [`deterministic_mapping`] turns a
//! record into a video with no randomness of its own.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Binding, Bound, DenoiserConfig, KVCache, LoraSet, ParamSet};
use crate::diffnum::Tape;
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::refiner::{refine, RefineFlags, RefinerParams, ReflectiveContext};
use crate::rng::{self, Role};
use crate::schedule::{forward_diffuse, predict_clean, NoiseSchedule};
use crate::synthdata::{Condition, LatentSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefinerKind {
    /// Refines the intermediate noises of the path.
    Pathwise,
    /// Refines the initial noise only.
    Initial,
}

#[derive(Clone, Copy)]
pub struct RefinerRef<'a> {
    pub params: &'a RefinerParams,
    pub kind: RefinerKind,
    pub flags: &'a RefineFlags,
}

/// Everything that defines a sampler apart from the noises.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub cfg: &'a DenoiserConfig,
    pub base: &'a ParamSet,
    pub lora: Option<&'a LoraSet>,
    pub refiner: Option<RefinerRef<'a>>,
    pub schedule: &'a NoiseSchedule,
    pub n_chunks: usize,
}

impl<'a> Generator<'a> {
    pub fn base_binding(&self) -> Binding<'a> {
        Binding {
            base: self.base,
            base_trainable: false,
            lora: self.lora.map(|l| (l, false)),
            head: None,
        }
    }

    pub fn cond_vector(&self, cond: &Condition) -> Vec<f64> {
        cond.vector(self.cfg.cond_dim - self.cfg.frame_dim)
    }

    pub fn chunk_shape(&self) -> (usize, usize) {
        (self.cfg.chunk_frames, self.cfg.frame_dim)
    }
}

/// Draws of one chunk: the initial noise and the path noises for steps
/// `j = T−1, …, 1` in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkNoise {
    pub init: Frames,
    pub path: Vec<Frames>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub seed: u64,
    pub chunks: Vec<ChunkNoise>,
}

impl NoiseRecord {
    /// Stream-derived draws: `(seed, chunk, step, role)`.
    pub fn from_seed(seed: u64, n_chunks: usize, steps: usize, c: usize, d: usize) -> Self {
        let chunks = (0..n_chunks)
            .map(|i| ChunkNoise {
                init: rng::normal_frames(&mut rng::stream(seed, i, steps, Role::InitNoise), c, d),
                path: (1..steps)
                    .rev()
                    .map(|j| rng::normal_frames(&mut rng::stream(seed, i, j, Role::PathNoise), c, d))
                    .collect(),
            })
            .collect();
        Self { seed, chunks }
    }

    /// Path noise used at step index `j`.
    pub fn path_at(&self, chunk: usize, j: usize) -> &Frames {
        let p = &self.chunks[chunk].path;
        &p[p.len() - j]
    }

    pub fn check(&self, n_chunks: usize, steps: usize) -> Result<()> {
        if self.chunks.len() != n_chunks || self.chunks.iter().any(|c| c.path.len() + 1 != steps) {
            return Err(Error::Invalid(format!(
                "noise record does not cover {n_chunks} chunks × {steps} steps"
            )));
        }
        Ok(())
    }
}

/// Evaluation counts of one rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub model_evals: u64,
    pub refiner_evals: u64,
    pub noise_draws: u64,
    pub verify: u64,
}

impl Counters {
    pub fn add(&mut self, o: &Counters) {
        self.model_evals += o.model_evals;
        self.refiner_evals += o.refiner_evals;
        self.noise_draws += o.noise_draws;
        self.verify += o.verify;
    }

    pub fn nfe(&self) -> u64 {
        self.model_evals + self.refiner_evals
    }
}

/// Frozen, gradient-free evaluation state for one rollout: bound weights
/// plus the base and refiner caches.
pub struct Engine<'a> {
    pub gen: Generator<'a>,
    tape: Tape,
    mark: usize,
    base: Bound,
    refiner: Option<Bound>,
    pub base_cache: KVCache,
    pub ref_cache: Option<KVCache>,
    pub counters: Counters,
}

impl<'a> Engine<'a> {
    pub fn new(gen: Generator<'a>, cond: &Condition) -> Result<Self> {
        let modes = gen.cfg.cond_dim.saturating_sub(gen.cfg.frame_dim);
        if cond.direction.len() != gen.cfg.frame_dim || cond.mode >= modes {
            return Err(Error::Invalid("condition does not match the denoiser".into()));
        }
        let mut tape = Tape::no_grad();
        let base = Bound::bind(&mut tape, gen.cfg, gen.base_binding())?;
        let refiner = match gen.refiner {
            Some(r) => Some(Bound::bind(&mut tape, gen.cfg, r.params.binding(gen.base, false))?),
            None => None,
        };
        let cv = gen.cond_vector(cond);
        let base_cache = base.init_cache(&mut tape, &cv)?;
        let ref_cache = match &refiner {
            Some(b) => Some(b.init_cache(&mut tape, &cv)?),
            None => None,
        };
        let mark = tape.mark();
        Ok(Self {
            gen,
            tape,
            mark,
            base,
            refiner,
            base_cache,
            ref_cache,
            counters: Counters::default(),
        })
    }

    pub fn velocity(&mut self, x: &Frames, sigma: f64, start: i64) -> Result<Frames> {
        let xv = self.tape.constant(x.data.clone(), &[x.rows, x.dim])?;
        let v = self.base.forward_chunk(&mut self.tape, &self.base_cache, xv, sigma, start)?;
        let out = Frames::new(x.rows, x.dim, self.tape.value(v).to_vec())?;
        self.tape.rewind(self.mark);
        self.counters.model_evals += 1;
        Ok(out)
    }

    /// One model evaluation followed by the clean prediction.
    pub fn denoise(&mut self, x: &Frames, sigma: f64, start: i64) -> Result<Frames> {
        let v = self.velocity(x, sigma, start)?;
        predict_clean(x, &v, sigma)
    }

    /// Noise residual for `eps` at `sigma`; `reflect` is the previous
    /// clean prediction when the reflect block is enabled.
    pub fn refine(&mut self, eps: &Frames, sigma: f64, start: i64, reflect: Option<&Frames>) -> Result<Frames> {
        let r = self
            .gen
            .refiner
            .ok_or_else(|| Error::Invalid("no refiner attached".into()))?;
        let bound = self.refiner.as_ref().expect("bound with refiner");
        let cache = self.ref_cache.as_mut().expect("refiner cache");
        let reflect = if r.flags.reflect { reflect } else { None };
        let ctx = ReflectiveContext::build(&mut self.tape, bound, cache, reflect, sigma, start)?;
        let ev = self.tape.constant(eps.data.clone(), &[eps.rows, eps.dim])?;
        let d = refine(&mut self.tape, bound, ev, &ctx, r.flags.reflect && r.kind == RefinerKind::Pathwise)?;
        let out = Frames::new(eps.rows, eps.dim, self.tape.value(d).to_vec())?;
        self.tape.rewind(self.mark);
        self.counters.refiner_evals += 1;
        Ok(out)
    }

    /// Rebuilds (or drops) the refiner's reflect block without refining.
    pub fn prepare_reflect(&mut self, reflect: Option<&Frames>, start: i64) -> Result<()> {
        let (Some(bound), Some(cache)) = (self.refiner.as_ref(), self.ref_cache.as_mut()) else {
            return Err(Error::Invalid("no refiner attached".into()));
        };
        ReflectiveContext::build(&mut self.tape, bound, cache, reflect, 0.0, start)?;
        self.tape.rewind(self.mark);
        Ok(())
    }

    /// Finalizes a chunk: clean history for the base and (unless ablated)
    /// for the refiner.
    pub fn commit(&mut self, chunk: &Frames, start: i64) -> Result<()> {
        self.base.append_history(&mut self.tape, &mut self.base_cache, chunk, start)?;
        if let (Some(b), Some(cache), Some(r)) = (&self.refiner, self.ref_cache.as_mut(), self.gen.refiner) {
            if r.flags.history {
                b.append_history(&mut self.tape, cache, chunk, start)?;
            } else {
                cache.clear_reflect();
            }
        }
        self.tape.rewind(self.mark);
        Ok(())
    }

    /// Runs steps `T, …, 1` of one chunk from the recorded draws.
    pub fn run_chunk(&mut self, noise: &ChunkNoise, start: i64) -> Result<Frames> {
        self.run_chunk_until(noise, start, 1)
    }

    /// Runs steps `T, …, last` and returns the clean prediction of step
    /// `last`.
    pub fn run_chunk_until(&mut self, noise: &ChunkNoise, start: i64, last: usize) -> Result<Frames> {
        let sched = self.gen.schedule;
        let t = sched.len();
        if last == 0 || last > t {
            return Err(Error::Invalid(format!("step {last} outside 1..={t}")));
        }
        let mut x = noise.init.clone();
        self.counters.noise_draws += 1;
        if let Some(r) = self.gen.refiner {
            if r.kind == RefinerKind::Initial {
                let d = self.refine(&x, 1.0, start, None)?;
                x = x.add(&d)?;
            }
        }
        let mut x0 = self.denoise(&x, sched.sigma_at(t), start)?;
        for j in (last..t).rev() {
            let mut eps = noise.path[t - 1 - j].clone();
            self.counters.noise_draws += 1;
            if let Some(r) = self.gen.refiner {
                if r.kind == RefinerKind::Pathwise && r.flags.refines(j) {
                    let d = self.refine(&eps, sched.sigma_at(j), start, Some(&x0))?;
                    eps = eps.add(&d)?;
                }
            }
            let xs = forward_diffuse(&x0, &eps, sched.sigma_at(j))?;
            x0 = self.denoise(&xs, sched.sigma_at(j), start)?;
        }
        Ok(x0)
    }
}

fn check_generator(gen: &Generator<'_>) -> Result<()> {
    if gen.schedule.is_empty() {
        return Err(Error::Schedule("empty schedule".into()));
    }
    if gen.n_chunks * gen.cfg.chunk_frames > gen.cfg.max_frames {
        return Err(Error::Config(format!(
            "{} chunks of {} frames exceed max_frames {}",
            gen.n_chunks, gen.cfg.chunk_frames, gen.cfg.max_frames
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub video: LatentSequence,
    pub record: NoiseRecord,
    pub counters: Counters,
}

/// `F_θ`: a pure function of the noise record and the condition.
pub fn deterministic_mapping(gen: &Generator<'_>, record: &NoiseRecord, cond: &Condition) -> Result<(LatentSequence, Counters)> {
    mapping_until(gen, record, cond, 1)
}

/// Rollout in which every chunk stops at step `last` and its clean
/// prediction there becomes history.
pub fn mapping_until(gen: &Generator<'_>, record: &NoiseRecord, cond: &Condition, last: usize) -> Result<(LatentSequence, Counters)> {
    check_generator(gen)?;
    record.check(gen.n_chunks, gen.schedule.len())?;
    let mut eng = Engine::new(*gen, cond)?;
    let c = gen.cfg.chunk_frames;
    let mut chunks = Vec::with_capacity(gen.n_chunks);
    for (i, noise) in record.chunks.iter().enumerate() {
        let start = (i * c) as i64;
        let out = eng.run_chunk_until(noise, start, last)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("chunk {i}")));
        }
        eng.commit(&out, start)?;
        chunks.push(out);
    }
    let video = LatentSequence {
        chunks,
        condition: cond.clone(),
        provenance: format!("rollout:{}", record.seed),
    };
    Ok((video, eng.counters))
}

/// Stochastic denoise–renoise rollout with draws from `seed`.
pub fn rollout_stochastic(gen: &Generator<'_>, cond: &Condition, seed: u64) -> Result<Rollout> {
    if gen.schedule.is_empty() {
        return Err(Error::Schedule("empty schedule".into()));
    }
    let (c, d) = gen.chunk_shape();
    let record = NoiseRecord::from_seed(seed, gen.n_chunks, gen.schedule.len(), c, d);
    let (video, counters) = deterministic_mapping(gen, &record, cond)?;
    Ok(Rollout { video, record, counters })
}

/// Euler integration of the flow ODE from σ = 1 down to σ = 0 along the
/// schedule; `velocity(x, σ)` predicts `x0 − ε`.
pub fn ode_integrate(
    x1: &Frames,
    schedule: &NoiseSchedule,
    mut velocity: impl FnMut(&Frames, f64) -> Result<Frames>,
) -> Result<Frames> {
    let s = schedule.sigmas();
    let mut x = x1.clone();
    for (k, &sigma) in s.iter().enumerate() {
        let next = s.get(k + 1).copied().unwrap_or(0.0);
        let v = velocity(&x, sigma)?;
        x.check_same(&v, "ode_step")?;
        let h = sigma - next;
        x.data.iter_mut().zip(&v.data).for_each(|(a, b)| *a += h * b);
    }
    Ok(x)
}

/// ODE rollout: one initial draw per chunk, no intermediate noise.
pub fn rollout_ode(gen: &Generator<'_>, cond: &Condition, seed: u64) -> Result<(LatentSequence, Counters)> {
    check_generator(gen)?;
    let (c, d) = gen.chunk_shape();
    let plain = Generator { refiner: None, ..*gen };
    let mut eng = Engine::new(plain, cond)?;
    let t = gen.schedule.len();
    let mut chunks = Vec::with_capacity(gen.n_chunks);
    for i in 0..gen.n_chunks {
        let start = (i * c) as i64;
        let x1 = rng::normal_frames(&mut rng::stream(seed, i, t, Role::InitNoise), c, d);
        eng.counters.noise_draws += 1;
        let out = ode_integrate(&x1, gen.schedule, |x, s| eng.velocity(x, s, start))?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("chunk {i}")));
        }
        eng.commit(&out, start)?;
        chunks.push(out);
    }
    let video = LatentSequence {
        chunks,
        condition: cond.clone(),
        provenance: format!("ode:{seed}"),
    };
    Ok((video, eng.counters))
}

#[cfg(test)]
mod tests;
