//! Inference-time search baselines over the frozen sampler: Best-of-N over
//! initial noises per chunk and Search-over-Path over per-step noises.
//!
//! Candidate `m` draws its noise from the record of seed
//! `child_seed(seed, m)`, except candidate 0 which reuses the plain rollout
//! record, so a single candidate reproduces the base rollout bitwise.

use serde::{Deserialize, Serialize};

use crate::frames::Frames;
use crate::rng::child_seed;
use crate::sampler::{Counters, Engine, Generator, NoiseRecord};
use crate::schedule::forward_diffuse;
use crate::synthdata::{reward_frames, Condition, LatentSequence, RewardWeights};
use crate::{Error, Result};

/// Overhead of one searched video relative to a single rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overhead {
    pub delta_nfe: u64,
    pub verify: u64,
    pub counters: Counters,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub video: LatentSequence,
    pub overhead: Overhead,
    /// Selected candidate per chunk (BoN) or per chunk and step (SoP,
    /// first entry is step `T`).
    pub choices: Vec<Vec<usize>>,
    /// Candidate scores in the same layout as `choices`.
    pub scores: Vec<Vec<Vec<f64>>>,
}

/// Latent chunk reward against the condition's direction.
pub fn chunk_reward(w: RewardWeights) -> impl Fn(&Frames, &Condition) -> Result<f64> {
    move |x, cond| Ok(reward_frames(x, &cond.direction, &w)?.total)
}

/// Index of the first maximum; NaN scores are rejected.
pub fn argmax(scores: &[f64]) -> Result<usize> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("candidate score".into()));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

fn candidate_records(gen: &Generator<'_>, seed: u64, n: usize) -> Vec<NoiseRecord> {
    let (c, d) = gen.chunk_shape();
    (0..n)
        .map(|m| {
            let s = if m == 0 { seed } else { child_seed(seed, m as u64) };
            NoiseRecord::from_seed(s, gen.n_chunks, gen.schedule.len(), c, d)
        })
        .collect()
}

fn finish(gen: &Generator<'_>, cond: &Condition, chunks: Vec<Frames>, eng: &Engine<'_>, tag: String) -> (LatentSequence, Overhead) {
    let base = (gen.n_chunks * gen.schedule.len()) as u64;
    let counters = eng.counters;
    let video = LatentSequence {
        chunks,
        condition: cond.clone(),
        provenance: tag,
    };
    let overhead = Overhead {
        delta_nfe: counters.nfe() - base,
        verify: counters.verify,
        counters,
    };
    (video, overhead)
}

/// Per chunk: `n` complete candidate chunks, each scored once, argmax kept.
pub fn best_of_n<F>(gen: &Generator<'_>, cond: &Condition, n: usize, reward_fn: F, seed: u64) -> Result<SearchResult>
where
    F: Fn(&Frames, &Condition) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::Invalid("best-of-n needs n ≥ 1".into()));
    }
    let records = candidate_records(gen, seed, n);
    let mut eng = Engine::new(*gen, cond)?;
    let cf = gen.cfg.chunk_frames;
    let (mut chunks, mut choices, mut scores) = (vec![], vec![], vec![]);
    for i in 0..gen.n_chunks {
        let start = (i * cf) as i64;
        let mut cands = Vec::with_capacity(n);
        let mut sc = Vec::with_capacity(n);
        for rec in &records {
            let x = eng.run_chunk(&rec.chunks[i], start)?;
            sc.push(reward_fn(&x, cond)?);
            eng.counters.verify += 1;
            cands.push(x);
        }
        let best = argmax(&sc)?;
        let x = cands.swap_remove(best);
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("chunk {i}")));
        }
        eng.commit(&x, start)?;
        chunks.push(x);
        choices.push(vec![best]);
        scores.push(vec![sc]);
    }
    let (video, overhead) = finish(gen, cond, chunks, &eng, format!("bon{n}:{seed}"));
    Ok(SearchResult {
        video,
        overhead,
        choices,
        scores,
    })
}

/// Greedy per-step search: at every step `k` candidate noises are denoised
/// and the clean prediction with the highest reward is carried forward.
pub fn search_over_path<F>(gen: &Generator<'_>, cond: &Condition, k: usize, reward_fn: F, seed: u64) -> Result<SearchResult>
where
    F: Fn(&Frames, &Condition) -> Result<f64>,
{
    if k == 0 {
        return Err(Error::Invalid("search-over-path needs k ≥ 1".into()));
    }
    if gen.refiner.is_some() {
        return Err(Error::Invalid("search-over-path runs on the plain sampler".into()));
    }
    if gen.schedule.is_empty() {
        return Err(Error::Schedule("empty schedule".into()));
    }
    let records = candidate_records(gen, seed, k);
    let sched = gen.schedule;
    let t = sched.len();
    let mut eng = Engine::new(*gen, cond)?;
    let cf = gen.cfg.chunk_frames;
    let (mut chunks, mut choices, mut scores) = (vec![], vec![], vec![]);
    for i in 0..gen.n_chunks {
        let start = (i * cf) as i64;
        let (mut picks, mut step_scores) = (vec![], vec![]);
        let mut x0: Option<Frames> = None;
        for j in (1..=t).rev() {
            let sigma = sched.sigma_at(j);
            let mut cands = Vec::with_capacity(k);
            let mut sc = Vec::with_capacity(k);
            for rec in &records {
                let noise = &rec.chunks[i];
                eng.counters.noise_draws += 1;
                let xs = match &x0 {
                    None => noise.init.clone(),
                    Some(prev) => forward_diffuse(prev, &noise.path[t - 1 - j], sigma)?,
                };
                let c = eng.denoise(&xs, sigma, start)?;
                sc.push(reward_fn(&c, cond)?);
                eng.counters.verify += 1;
                cands.push(c);
            }
            let best = argmax(&sc)?;
            x0 = Some(cands.swap_remove(best));
            picks.push(best);
            step_scores.push(sc);
        }
        let x = x0.expect("schedule is non-empty");
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("chunk {i}")));
        }
        eng.commit(&x, start)?;
        chunks.push(x);
        choices.push(picks);
        scores.push(step_scores);
    }
    let (video, overhead) = finish(gen, cond, chunks, &eng, format!("sop{k}:{seed}"));
    Ok(SearchResult {
        video,
        overhead,
        choices,
        scores,
    })
}
