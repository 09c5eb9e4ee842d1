//! Refiner training with gradients through one refinement step per chunk,
//! the adapter and initial-noise baselines, and base pretraining.
//!
//! A training step draws one intermediate step `s` for the whole batch.
//! Each chunk is rolled out without gradients down to step `s + 1`; step
//! `s` alone (refiner, re-noising, one base evaluation) is recorded on a
//! gradient tape and its clean prediction is the chunk's output. Caches
//! only ever hold plain values, so history and reflect inputs are detached.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Binding, Bound, DenoiserConfig, Group, LoraSet, ParamSet, Tensor, TokenRole};
use crate::diffnum::{Tape, Var};
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::objectives::{dmd_surrogate_with_gap, weight_gap, DmdWeighting, fake_score_update, refiner_loss, DmdConfig, FakeScoreModel, FakeSigma, Objective};
use crate::parallel::par_map;
use crate::refiner::{regularizer_value, RefineFlags, RefinerParams};
use crate::rng::{self, Role};
use crate::sampler::{Engine, Generator, NoiseRecord, RefinerKind, RefinerRef};
use crate::schedule::{forward_diffuse_var, predict_clean_var, shift_sigma, NoiseSchedule};
use crate::synthdata::{reward_frames, reward_var, Condition, RewardWeights, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient entry see a zero
    /// gradient; a gradient for an unknown name is an error.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[(String, Vec<f64>)]) -> Result<()> {
        let mut by_name: BTreeMap<&str, &Vec<f64>> = BTreeMap::new();
        for (k, g) in grads {
            by_name.insert(k.as_str(), g);
        }
        for k in by_name.keys() {
            if !params.iter().any(|(n, _)| n == k) {
                return Err(Error::Invalid(format!("gradient for unknown parameter {k}")));
            }
        }
        for (name, t) in &params {
            let n = t.data.len();
            if by_name.get(name.as_str()).is_some_and(|g| g.len() != n)
                || self.m.get(name).is_some_and(|m| m.len() != n)
            {
                return Err(Error::shape("optimizer_step", &[n], &[by_name.get(name.as_str()).map_or(0, |g| g.len())]));
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, t) in params {
            let n = t.data.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = by_name.get(name.as_str());
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let p = &mut t.data[i];
                *p *= 1.0 - c.lr * c.weight_decay;
                *p -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// What a training run adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Refiner on the intermediate path noises.
    Pathwise,
    /// Refiner on the initial noise of each chunk.
    InitRefiner,
    /// Adapters on the denoiser itself.
    Lora,
    /// All denoiser weights (few-step distillation of the base).
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// `None` picks the objective's default.
    pub reg_weight: Option<f64>,
    /// `None` picks the objective's default.
    pub lr: Option<f64>,
    pub optim: OptimConfig,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub rank: usize,
    pub alpha: f64,
    pub reward: RewardWeights,
    pub dmd: DmdConfig,
    /// Fake-score steps on base rollouts before the first update.
    pub fake_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dmd,
            reg_weight: None,
            lr: None,
            optim: OptimConfig::default(),
            batch: 8,
            steps: 1000,
            seed: 0,
            rank: 8,
            alpha: 8.0,
            reward: RewardWeights::default(),
            dmd: DmdConfig::default(),
            fake_warmup: 20,
        }
    }
}

impl TrainConfig {
    pub fn reg(&self) -> f64 {
        self.reg_weight.unwrap_or(self.objective.default_reg())
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(self.objective.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.reg() < 0.0 {
            return Err(Error::Config("reg_weight must be ≥ 0".into()));
        }
        self.dmd.validate()
    }
}

/// How the rollout above step `s` is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Steps above `s` run on a gradient-free tape.
    Truncated,
    /// Every step is recorded; refiner outputs at steps other than `s`
    /// are detached. Used to check the truncation.
    Reference,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub s: usize,
    pub loss: f64,
    /// `−DMD surrogate` or the reward, batch mean.
    pub fidelity: f64,
    pub reward: f64,
    pub reg: f64,
    pub fake_loss: f64,
    pub peak_tape: usize,
    /// Refiner evaluations recorded on gradient tapes, per sample.
    pub grad_refines: usize,
    pub wall_ms: f64,
}

/// Gradients and diagnostics of one batch element.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub grads: Vec<(String, Vec<f64>)>,
    pub loss: f64,
    pub fidelity: f64,
    pub reward: f64,
    pub reg: f64,
    pub video: Frames,
    pub peak_tape: usize,
    pub grad_refines: usize,
}

pub struct Trainer {
    pub world: World,
    pub cfg: DenoiserConfig,
    pub base: ParamSet,
    pub schedule: NoiseSchedule,
    pub n_chunks: usize,
    pub flags: RefineFlags,
    pub tc: TrainConfig,
    pub arm: Arm,
    pub refiner: Option<RefinerParams>,
    pub lora: Option<LoraSet>,
    pub opt: AdamW,
    /// Fake scores, one per exit step `s` (index `s − 1`) or a single
    /// shared one; empty for the reward objective.
    pub fake: Vec<FakeScoreModel>,
    pub step: u64,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        world: World,
        cfg: DenoiserConfig,
        base: ParamSet,
        schedule: NoiseSchedule,
        flags: RefineFlags,
        tc: TrainConfig,
        arm: Arm,
    ) -> Result<Self> {
        tc.validate()?;
        let n_chunks = world.spec.n_chunks;
        if world.spec.d != cfg.frame_dim || world.spec.c != cfg.chunk_frames || world.spec.cond_dim() != cfg.cond_dim {
            return Err(Error::Config("world and denoiser extents disagree".into()));
        }
        let mut init = rng::stream(tc.seed, 0, 0, Role::Init);
        let (refiner, lora) = match arm {
            Arm::Pathwise | Arm::InitRefiner => (Some(RefinerParams::new(&cfg, tc.rank, tc.alpha, &mut init)?), None),
            Arm::Lora => (None, Some(LoraSet::new(&cfg, tc.rank, tc.alpha, &mut init)?)),
            Arm::Base => (None, None),
        };
        let n_fake = match tc.objective {
            Objective::Dmd if tc.dmd.fake_per_exit => schedule.len().saturating_sub(1).max(1),
            Objective::Dmd => 1,
            Objective::Reward => 0,
        };
        let fake = (0..n_fake)
            .map(|_| FakeScoreModel::new(cfg.clone(), true, tc.dmd.fake_lr, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let opt = AdamW::new(OptimConfig {
            lr: tc.learning_rate(),
            ..tc.optim
        });
        Ok(Self {
            world,
            cfg,
            base,
            schedule,
            n_chunks,
            flags,
            tc,
            arm,
            refiner,
            lora,
            opt,
            fake,
            step: 0,
        })
    }

    pub fn generator(&self) -> Generator<'_> {
        let refiner = self.refiner.as_ref().map(|p| RefinerRef {
            params: p,
            kind: if self.arm == Arm::InitRefiner {
                RefinerKind::Initial
            } else {
                RefinerKind::Pathwise
            },
            flags: &self.flags,
        });
        Generator {
            cfg: &self.cfg,
            base: &self.base,
            lora: self.lora.as_ref(),
            refiner,
            schedule: &self.schedule,
            n_chunks: self.n_chunks,
        }
    }

    /// Steps `s` a training step may draw.
    pub fn eligible_steps(&self) -> Vec<usize> {
        (1..self.schedule.len())
            .filter(|&j| self.arm != Arm::Pathwise || self.flags.refines(j))
            .collect()
    }

    pub fn draw_s(&self, rng: &mut impl Rng) -> Result<usize> {
        let e = self.eligible_steps();
        if e.is_empty() {
            return Err(Error::Config("no intermediate step to train on".into()));
        }
        Ok(e[rng.random_range(0..e.len())])
    }

    fn step_seed(&self) -> u64 {
        rng::mix(&[self.tc.seed, 0x7ea1, self.step])
    }

    /// Conditions for the current step.
    pub fn draw_batch(&self) -> Vec<Condition> {
        let seed = self.step_seed();
        (0..self.tc.batch)
            .map(|b| Condition::random(&self.world.spec, &mut rng::stream(seed, b, 0, Role::Condition)))
            .collect()
    }

    fn trainable_binding(&self) -> Binding<'_> {
        match self.arm {
            Arm::Pathwise | Arm::InitRefiner => self.refiner.as_ref().expect("refiner arm").binding(&self.base, true),
            Arm::Lora => Binding {
                base: &self.base,
                base_trainable: false,
                lora: Some((self.lora.as_ref().expect("lora arm"), true)),
                head: None,
            },
            Arm::Base => Binding {
                base: &self.base,
                base_trainable: true,
                lora: None,
                head: None,
            },
        }
    }

    /// Rollout with gradients at step `s`, objective and backward pass for
    /// one condition. `loss_scale` multiplies the loss (e.g. `1/batch`).
    pub fn sample_grad(&self, cond: &Condition, s: usize, sample_seed: u64, mode: GradMode, loss_scale: f64) -> Result<SampleGrad> {
        let t = self.schedule.len();
        if s == 0 || s >= t {
            return Err(Error::Invalid(format!("training step s = {s} outside 1..{t}")));
        }
        if mode == GradMode::Reference && self.arm != Arm::Pathwise {
            return Err(Error::Invalid("reference mode is defined for the pathwise refiner".into()));
        }
        let gen = self.generator();
        let (c, d) = gen.chunk_shape();
        let record = NoiseRecord::from_seed(sample_seed, self.n_chunks, t, c, d);
        let mut eng = Engine::new(gen, cond)?;
        let mut tape = Tape::new();
        let train = Bound::bind(&mut tape, &self.cfg, self.trainable_binding())?;
        let frozen = match self.arm {
            Arm::Pathwise | Arm::InitRefiner => Some(Bound::bind(&mut tape, &self.cfg, gen.base_binding())?),
            Arm::Lora | Arm::Base => None,
        };
        let base = frozen.as_ref().unwrap_or(&train);
        let sig = |j: usize| self.schedule.sigma_at(j);
        let mut outs = Vec::with_capacity(self.n_chunks);
        let mut deltas: Vec<Var> = Vec::new();
        let mut grad_refines = 0;
        for (i, noise) in record.chunks.iter().enumerate() {
            let start = (i * c) as i64;
            let denoise = |tape: &mut Tape, eng: &Engine<'_>, x: Var, sigma: f64| -> Result<Var> {
                let v = base.forward_chunk(tape, &eng.base_cache, x, sigma, start)?;
                predict_clean_var(tape, x, v, sigma)
            };
            let out = if self.arm == Arm::InitRefiner {
                // The initial residual reaches the output only through the
                // base steps T, …, s, so those stay on the tape.
                let x = tape.constant(noise.init.data.clone(), &[c, d])?;
                eng.prepare_reflect(None, start)?;
                let delta = train.forward_chunk(&mut tape, eng.ref_cache.as_ref().expect("refiner cache"), x, 1.0, start)?;
                grad_refines += 1;
                deltas.push(delta);
                let x = tape.add(x, delta)?;
                let mut x0 = denoise(&mut tape, &eng, x, sig(t))?;
                for j in (s..t).rev() {
                    let e = tape.constant(record.path_at(i, j).data.clone(), &[c, d])?;
                    let xs = forward_diffuse_var(&mut tape, x0, e, sig(j))?;
                    x0 = denoise(&mut tape, &eng, xs, sig(j))?;
                }
                x0
            } else {
                let x0 = match mode {
                    GradMode::Truncated => {
                        let f = eng.run_chunk_until(noise, start, s + 1)?;
                        tape.constant(f.data, &[c, d])?
                    }
                    GradMode::Reference => {
                        let x = tape.constant(noise.init.data.clone(), &[c, d])?;
                        let mut x0 = denoise(&mut tape, &eng, x, sig(t))?;
                        for j in (s + 1..t).rev() {
                            let mut e = tape.constant(record.path_at(i, j).data.clone(), &[c, d])?;
                            if self.flags.refines(j) {
                                let refl = Frames::new(c, d, tape.value(x0).to_vec())?;
                                eng.prepare_reflect(self.flags.reflect.then_some(&refl), start)?;
                                let delta = train.forward_chunk(&mut tape, eng.ref_cache.as_ref().expect("refiner cache"), e, sig(j), start)?;
                                let delta = tape.detach(delta)?;
                                e = tape.add(e, delta)?;
                            }
                            let xs = forward_diffuse_var(&mut tape, x0, e, sig(j))?;
                            x0 = denoise(&mut tape, &eng, xs, sig(j))?;
                        }
                        x0
                    }
                };
                let mut e = tape.constant(record.path_at(i, s).data.clone(), &[c, d])?;
                if self.arm == Arm::Pathwise && self.flags.refines(s) {
                    let refl = Frames::new(c, d, tape.value(x0).to_vec())?;
                    eng.prepare_reflect(self.flags.reflect.then_some(&refl), start)?;
                    let delta = train.forward_chunk(&mut tape, eng.ref_cache.as_ref().expect("refiner cache"), e, sig(s), start)?;
                    grad_refines += 1;
                    deltas.push(delta);
                    e = tape.add(e, delta)?;
                }
                let xs = forward_diffuse_var(&mut tape, x0, e, sig(s))?;
                denoise(&mut tape, &eng, xs, sig(s))?
            };
            let value = Frames::new(c, d, tape.value(out).to_vec())?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training rollout chunk {i}")));
            }
            eng.commit(&value, start)?;
            outs.push(out);
        }
        let video = tape.concat_rows(&outs)?;
        let video_val = Frames::new(self.n_chunks * c, d, tape.value(video).to_vec())?;
        let reward = reward_frames(&video_val, &cond.direction, &self.tc.reward)?.total;
        let (dmd, rew) = match self.tc.objective {
            Objective::Dmd => {
                let fake = &self.fake[self.fake_index(s)];
                let mut r = rng::stream(sample_seed, 0, s, Role::DmdNoise);
                let sigma = self.tc.dmd.sample_sigma(&mut r);
                let eps = rng::normal_vec(&mut r, video_val.data.len());
                let xs: Vec<f64> = video_val.data.iter().zip(&eps).map(|(a, e)| (1.0 - sigma) * a + sigma * e).collect();
                let mut gap = fake.score_gap(&xs, sigma, cond)?;
                if self.tc.dmd.weighting != DmdWeighting::Score {
                    let real = self.world.noised_score(&xs, sigma, Some(cond.mode))?;
                    weight_gap(self.tc.dmd.weighting, &mut gap, &video_val.data, &xs, &real, sigma);
                }
                (Some(dmd_surrogate_with_gap(&mut tape, video, sigma, &eps, &gap, self.tc.dmd.normalize)?.0), None)
            }
            Objective::Reward => (None, Some(reward_var(&mut tape, video, &cond.direction, &self.tc.reward)?.0)),
        };
        let fidelity = match (dmd, rew) {
            (Some(v), _) => -tape.scalar(v),
            (_, Some(v)) => tape.scalar(v),
            _ => unreachable!(),
        };
        let reg: f64 = deltas.iter().map(|dv| regularizer_value(tape.value(*dv))).sum();
        let loss = refiner_loss(&mut tape, dmd, rew, &deltas, self.tc.reg())?;
        let loss = tape.scale(loss, loss_scale)?;
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let g = tape.backward(loss)?;
        if frozen.as_ref().is_some_and(|f| !f.trainable.is_empty()) {
            return Err(Error::Invalid("frozen base weights were placed as trainable".into()));
        }
        let grads: Vec<(String, Vec<f64>)> = train.trainable.iter().map(|(k, v)| (k.clone(), g.get(*v))).collect();
        let allowed: fn(&str) -> bool = match self.arm {
            Arm::Pathwise | Arm::InitRefiner => |k: &str| k.starts_with("lora.") || k.starts_with("head."),
            Arm::Lora => |k: &str| k.starts_with("lora."),
            Arm::Base => |k: &str| k.starts_with("base."),
        };
        if let Some((k, _)) = grads.iter().find(|(k, _)| !allowed(k)) {
            return Err(Error::Invalid(format!("gradient reached frozen parameter {k}")));
        }
        Ok(SampleGrad {
            grads,
            loss: loss_val,
            fidelity,
            reward,
            reg,
            video: video_val,
            peak_tape: tape.peak_len(),
            grad_refines,
        })
    }

    fn apply(&mut self, grads: &[(String, Vec<f64>)]) -> Result<()> {
        let params: Vec<(String, &mut Tensor)> = match self.arm {
            Arm::Pathwise | Arm::InitRefiner => self.refiner.as_mut().expect("refiner arm").tensors_mut(),
            Arm::Lora => self
                .lora
                .as_mut()
                .expect("lora arm")
                .params
                .tensors
                .iter_mut()
                .map(|(k, v)| (format!("lora.{k}"), v))
                .collect(),
            Arm::Base => self.base.tensors.iter_mut().map(|(k, v)| (format!("base.{k}"), v)).collect(),
        };
        self.opt.step(params, grads)
    }

    fn fake_index(&self, s: usize) -> usize {
        if self.fake.len() > 1 {
            s - 1
        } else {
            0
        }
    }

    /// Fits the fake scores to rollouts of the current generator that exit
    /// at their step (a uniformly drawn eligible step for a shared fake).
    pub fn warmup_fake(&mut self, steps: usize) -> Result<f64> {
        if self.fake.is_empty() || steps == 0 {
            return Ok(0.0);
        }
        let seed = rng::mix(&[self.tc.seed, 0xfa4e]);
        let mut r = rng::stream(seed, 0, 0, Role::FakeScore);
        let eligible = self.eligible_steps();
        let mut last = 0.0;
        for k in 0..steps {
            let exits: Vec<usize> = if self.fake.len() > 1 {
                eligible.clone()
            } else {
                vec![self.draw_s(&mut r)?]
            };
            for s in exits {
                let batch = self.rollout_batch(rng::child_seed(seed, k as u64), s)?;
                let dmd = self.tc.dmd.clone();
                let i = self.fake_index(s);
                last = fake_score_update(&mut self.fake[i], Some(&self.world), &batch, FakeSigma::Range(&dmd), &mut r)?;
            }
        }
        Ok(last)
    }

    fn rollout_batch(&self, seed: u64, exit: usize) -> Result<Vec<(Frames, Condition)>> {
        let gen = self.generator();
        let (c, d) = gen.chunk_shape();
        let out = par_map(self.tc.batch, |b| -> Result<(Frames, Condition)> {
            let cond = Condition::random(&self.world.spec, &mut rng::stream(seed, b, 0, Role::Condition));
            let record = NoiseRecord::from_seed(rng::child_seed(seed, b as u64), self.n_chunks, self.schedule.len(), c, d);
            let (video, _) = crate::sampler::mapping_until(&gen, &record, &cond, exit)?;
            Ok((video.to_frames(), cond))
        });
        out.into_iter().collect()
    }

    /// One step of the configured arm on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let mut r = rng::stream(self.step_seed(), 0, 0, Role::TrainStep);
        let s = self.draw_s(&mut r)?;
        let conds = self.draw_batch();
        self.train_step_at(&conds, s)
    }

    /// One step with a given batch and truncation step.
    pub fn train_step_at(&mut self, conds: &[Condition], s: usize) -> Result<StepMetrics> {
        let clock = Instant::now();
        if conds.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if !self.eligible_steps().contains(&s) {
            return Err(Error::Invalid(format!("s = {s} is not an eligible training step")));
        }
        let seed = self.step_seed();
        let scale = 1.0 / conds.len() as f64;
        let outs = par_map(conds.len(), |b| self.sample_grad(&conds[b], s, rng::child_seed(seed, b as u64), GradMode::Truncated, scale));
        let outs: Vec<SampleGrad> = outs.into_iter().collect::<Result<_>>()?;
        let mut total: Vec<(String, Vec<f64>)> = outs[0].grads.clone();
        for o in &outs[1..] {
            for ((_, acc), (_, g)) in total.iter_mut().zip(&o.grads) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        self.apply(&total)?;
        let mut fake_loss = 0.0;
        if !self.fake.is_empty() {
            let i = self.fake_index(s);
            let fake = &mut self.fake[i];
            let batch: Vec<(Frames, Condition)> = outs.iter().zip(conds).map(|(o, c)| (o.video.clone(), c.clone())).collect();
            let mut r = rng::stream(seed, 0, 0, Role::FakeScore);
            for _ in 0..self.tc.dmd.k_fake {
                fake_loss = fake_score_update(fake, Some(&self.world), &batch, FakeSigma::Range(&self.tc.dmd), &mut r)?;
            }
        }
        let n = outs.len() as f64;
        let m = StepMetrics {
            step: self.step,
            s,
            loss: outs.iter().map(|o| o.loss).sum(),
            fidelity: outs.iter().map(|o| o.fidelity).sum::<f64>() / n,
            reward: outs.iter().map(|o| o.reward).sum::<f64>() / n,
            reg: outs.iter().map(|o| o.reg).sum::<f64>() / n,
            fake_loss,
            peak_tape: outs.iter().map(|o| o.peak_tape).max().unwrap_or(0),
            grad_refines: outs[0].grad_refines,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of drawing σ from the sampling schedule.
    pub p_schedule: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            seed: 1,
            p_schedule: 0.5,
        }
    }
}

/// Flow-matching pretraining with teacher-forced clean history: every
/// noisy chunk attends to the clean chunks before it.
pub struct Pretrainer {
    pub world: World,
    pub cfg: DenoiserConfig,
    pub params: ParamSet,
    pub schedule: NoiseSchedule,
    pub pc: PretrainConfig,
    pub opt: AdamW,
    pub step: u64,
}

impl Pretrainer {
    pub fn new(world: World, cfg: DenoiserConfig, schedule: NoiseSchedule, pc: PretrainConfig) -> Result<Self> {
        let params = cfg.init_params(&mut rng::stream(pc.seed, 0, 0, Role::Init))?;
        let opt = AdamW::new(OptimConfig {
            lr: pc.lr,
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        Ok(Self {
            world,
            cfg,
            params,
            schedule,
            pc,
            opt,
            step: 0,
        })
    }

    fn draw_sigma(&self, r: &mut impl Rng) -> f64 {
        if r.random::<f64>() < self.pc.p_schedule {
            let s = self.schedule.sigmas();
            s[r.random_range(0..s.len())]
        } else {
            shift_sigma(r.random_range(0.001..1.0), self.schedule.shift())
        }
    }

    /// One step; returns the velocity MSE.
    pub fn step(&mut self) -> Result<f64> {
        let seed = rng::mix(&[self.pc.seed, 0x9e7, self.step]);
        let (c, d) = (self.cfg.chunk_frames, self.cfg.frame_dim);
        let n = self.world.spec.n_chunks;
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, &self.cfg, Binding {
            base: &self.params,
            base_trainable: true,
            lora: None,
            head: None,
        })?;
        let mut terms = Vec::new();
        for k in 0..self.pc.batch {
            let mut r = rng::stream(seed, k, 0, Role::Data);
            let cond = Condition::random(&self.world.spec, &mut r);
            let video = self.world.sample_video(&cond, &mut r)?;
            let mut groups = Vec::with_capacity(2 * n);
            for (i, ch) in video.chunks.iter().enumerate() {
                groups.push(Group {
                    x: tape.constant(ch.data.clone(), &[c, d])?,
                    sigma: 0.0,
                    role: TokenRole::History,
                    start: (i * c) as i64,
                    sees: (0..i).collect(),
                });
            }
            let mut targets = Vec::with_capacity(n);
            for (i, ch) in video.chunks.iter().enumerate() {
                let sigma = self.draw_sigma(&mut r);
                let eps = rng::normal_vec(&mut r, c * d);
                let xs: Vec<f64> = ch.data.iter().zip(&eps).map(|(a, e)| (1.0 - sigma) * a + sigma * e).collect();
                targets.push(ch.data.iter().zip(&eps).map(|(a, e)| a - e).collect::<Vec<f64>>());
                groups.push(Group {
                    x: tape.constant(xs, &[c, d])?,
                    sigma,
                    role: TokenRole::Noisy,
                    start: (i * c) as i64,
                    sees: (0..i).collect(),
                });
            }
            let outs = b.forward_grouped(&mut tape, &cond.vector(self.world.spec.modes.len()), &groups)?;
            for (o, tg) in outs[n..].iter().zip(targets) {
                let tv = tape.constant(tg, &[c, d])?;
                let diff = tape.sub(*o, tv)?;
                terms.push(tape.sq_norm(diff)?);
            }
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        let loss = tape.scale(total, 1.0 / (self.pc.batch * n * c * d) as f64)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("pretraining loss".into()));
        }
        let g = tape.backward(loss)?;
        let grads: Vec<(String, Vec<f64>)> = b.trainable.iter().map(|(k, v)| (k.clone(), g.get(*v))).collect();
        let params = self.params.tensors.iter_mut().map(|(k, v)| (format!("base.{k}"), v)).collect();
        self.opt.step(params, &grads)?;
        self.step += 1;
        Ok(value)
    }
}
