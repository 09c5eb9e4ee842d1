//! Experiment drivers shared by the CLI and the acceptance suite: base
//! pretraining, refiner training, paired evaluation sets, search and the
//! ablation grid.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::round_f32;
use super::config::{AblationConfig, RunConfig, SamplerKind};
use super::metrics::{eval_metrics, MetricsRecord, SampleMetrics};
use crate::denoiser::{LoraSet, ParamSet, Tensor};
use crate::objectives::Objective;
use crate::parallel::par_map;
use crate::refiner::{RefineFlags, RefinerParams};
use crate::rng::child_seed;
use crate::sampler::{rollout_ode, rollout_stochastic, Counters, Generator, RefinerKind, RefinerRef};
use crate::schedule::NoiseSchedule;
use crate::search::{best_of_n, chunk_reward, search_over_path};
use crate::stats::{mean, paired_t};
use crate::synthdata::{Condition, LatentSequence, World};
use crate::trainer::{Arm, Pretrainer, TrainConfig, Trainer};
use crate::{Error, Result};

/// Parsed configuration with its world and schedule built.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: RunConfig,
    pub world: World,
    pub schedule: NoiseSchedule,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let world = World::from_params(&cfg.world)?;
        let schedule = cfg.schedule.build()?;
        Ok(Self { cfg, world, schedule })
    }

    fn plain<'a>(&'a self, base: &'a ParamSet) -> Generator<'a> {
        Generator {
            cfg: &self.cfg.denoiser,
            base,
            lora: None,
            refiner: None,
            schedule: &self.schedule,
            n_chunks: self.world.spec.n_chunks,
        }
    }

    /// Conditions and noise seeds of the paired evaluation set.
    pub fn eval_set(&self) -> Vec<(Condition, u64)> {
        let e = &self.cfg.eval;
        (0..e.conditions * e.per_condition)
            .map(|k| {
                let cond = Condition::for_seed(&self.world.spec, e.seed + (k / e.per_condition) as u64);
                (cond, child_seed(e.seed, k as u64))
            })
            .collect()
    }
}

fn train_record(step: u64, objective: &str, fidelity: f64, reward: f64, reg: Option<f64>, wall_ms: f64) -> MetricsRecord {
    MetricsRecord {
        step,
        objective: objective.into(),
        fidelity,
        reward,
        reg,
        diversity: None,
        dynamic_degree: None,
        nfe: 0,
        verify_count: 0,
        wall_ms,
    }
}

/// Flow-matching pretraining followed by the configured self-distillation.
/// Records carry `−loss` (flow) or the DMD fidelity (distill) per step.
/// The returned weights are rounded to checkpoint precision.
pub fn pretrain_base(ctx: &Ctx, mut log: impl FnMut(&MetricsRecord)) -> Result<ParamSet> {
    let mut pt = Pretrainer::new(ctx.world.clone(), ctx.cfg.denoiser.clone(), ctx.schedule.clone(), ctx.cfg.pretrain.clone())?;
    for k in 0..ctx.cfg.pretrain.steps {
        let clock = Instant::now();
        let loss = pt.step()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {k}")));
        }
        log(&train_record(k, "flow", -loss, 0.0, None, clock.elapsed().as_secs_f64() * 1e3));
    }
    let mut base = pt.params;
    let d = &ctx.cfg.distill;
    if d.steps > 0 {
        let tc = TrainConfig {
            objective: Objective::Dmd,
            lr: Some(d.lr),
            reg_weight: Some(0.0),
            steps: d.steps,
            ..ctx.cfg.train.clone()
        };
        let mut tr = Trainer::new(ctx.world.clone(), ctx.cfg.denoiser.clone(), base, ctx.schedule.clone(), RefineFlags::default(), tc, Arm::Base)?;
        tr.warmup_fake(tr.tc.fake_warmup)?;
        for k in 0..d.steps {
            let m = tr.train_step()?;
            log(&train_record(k, "distill", m.fidelity, m.reward, None, m.wall_ms));
        }
        base = tr.base;
    }
    if !base.is_finite() {
        return Err(Error::NonFinite("base weights".into()));
    }
    Ok(round_f32(&base))
}

/// Trained parameters of one arm.
#[derive(Debug, Clone, PartialEq)]
pub enum ArmParams {
    Refiner(RefinerParams),
    Lora(LoraSet),
}

impl ArmParams {
    /// Flat tensor set with `lora.*`, `head.*` and `meta.{rank,alpha}`.
    pub fn to_params(&self) -> ParamSet {
        let (lora, head) = match self {
            ArmParams::Refiner(r) => (&r.lora, Some(&r.head)),
            ArmParams::Lora(l) => (l, None),
        };
        let mut p = lora.params.with_prefix("lora");
        if let Some(h) = head {
            p.tensors.extend(h.with_prefix("head").tensors);
        }
        p.insert("meta.rank", Tensor::filled(&[1], lora.rank as f64));
        p.insert("meta.alpha", Tensor::filled(&[1], lora.alpha));
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        let rank = p.get("meta.rank")?.data[0];
        if rank < 1.0 || rank.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("bad adapter rank {rank}")));
        }
        let lora = LoraSet {
            rank: rank as usize,
            alpha: p.get("meta.alpha")?.data[0],
            params: p.strip_prefix("lora"),
        };
        let head = p.strip_prefix("head");
        Ok(if head.tensors.is_empty() {
            ArmParams::Lora(lora)
        } else {
            ArmParams::Refiner(RefinerParams { lora, head })
        })
    }
}

/// A frozen base plus an optional trained arm, ready to sample.
#[derive(Debug, Clone)]
pub struct Model {
    pub base: ParamSet,
    pub arm: Option<(Arm, ArmParams)>,
    pub flags: RefineFlags,
}

impl Model {
    pub fn plain(base: ParamSet) -> Self {
        Self {
            base,
            arm: None,
            flags: RefineFlags::default(),
        }
    }

    pub fn from_trainer(tr: &Trainer) -> Result<Self> {
        let params = match (tr.arm, &tr.refiner, &tr.lora) {
            (Arm::Pathwise | Arm::InitRefiner, Some(r), _) => ArmParams::Refiner(r.clone()),
            (Arm::Lora, _, Some(l)) => ArmParams::Lora(l.clone()),
            (Arm::Base, _, _) => return Ok(Self::plain(tr.base.clone())),
            _ => return Err(Error::Invalid("trainer holds no parameters for its arm".into())),
        };
        Ok(Self {
            base: tr.base.clone(),
            arm: Some((tr.arm, params)),
            flags: tr.flags.clone(),
        })
    }

    pub fn generator<'a>(&'a self, ctx: &'a Ctx) -> Result<Generator<'a>> {
        let mut g = ctx.plain(&self.base);
        match &self.arm {
            None => {}
            Some((Arm::Lora, ArmParams::Lora(l))) => g.lora = Some(l),
            Some((arm @ (Arm::Pathwise | Arm::InitRefiner), ArmParams::Refiner(r))) => {
                g.refiner = Some(RefinerRef {
                    params: r,
                    kind: if *arm == Arm::InitRefiner {
                        RefinerKind::Initial
                    } else {
                        RefinerKind::Pathwise
                    },
                    flags: &self.flags,
                })
            }
            Some((arm, _)) => return Err(Error::Invalid(format!("parameters do not fit arm {arm:?}"))),
        }
        Ok(g)
    }
}

/// Trains one arm on the frozen base; `tc` overrides the configured
/// training section.
pub fn train_arm(ctx: &Ctx, base: &ParamSet, arm: Arm, tc: TrainConfig, flags: RefineFlags, mut log: impl FnMut(&MetricsRecord)) -> Result<Trainer> {
    let name = match tc.objective {
        Objective::Dmd => "dmd",
        Objective::Reward => "reward",
    };
    let steps = tc.steps;
    let mut tr = Trainer::new(ctx.world.clone(), ctx.cfg.denoiser.clone(), base.clone(), ctx.schedule.clone(), flags, tc, arm)?;
    tr.warmup_fake(tr.tc.fake_warmup)?;
    for _ in 0..steps {
        let m = tr.train_step()?;
        log(&train_record(m.step, name, m.fidelity, m.reward, Some(m.reg), m.wall_ms));
    }
    Ok(tr)
}

/// Samples of the evaluation set with per-video counters.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub videos: Vec<LatentSequence>,
    pub counters: Counters,
    pub wall_ms: f64,
}

fn per_video(total: Counters, n: usize) -> Counters {
    let n = n.max(1) as u64;
    Counters {
        model_evals: total.model_evals / n,
        refiner_evals: total.refiner_evals / n,
        noise_draws: total.noise_draws / n,
        verify: total.verify / n,
    }
}

fn collect(outs: Vec<Result<(LatentSequence, Counters)>>, clock: Instant) -> Result<SampleSet> {
    let outs: Vec<(LatentSequence, Counters)> = outs.into_iter().collect::<Result<_>>()?;
    let mut total = Counters::default();
    outs.iter().for_each(|(_, c)| total.add(c));
    let n = outs.len();
    Ok(SampleSet {
        videos: outs.into_iter().map(|(v, _)| v).collect(),
        counters: per_video(total, n),
        wall_ms: clock.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn sample_set(ctx: &Ctx, model: &Model, sampler: SamplerKind) -> Result<SampleSet> {
    let gen = model.generator(ctx)?;
    let set = ctx.eval_set();
    let clock = Instant::now();
    let outs = par_map(set.len(), |k| {
        let (cond, seed) = &set[k];
        match sampler {
            SamplerKind::Stochastic => rollout_stochastic(&gen, cond, *seed).map(|r| (r.video, r.counters)),
            SamplerKind::Ode => rollout_ode(&gen, cond, *seed),
        }
    });
    collect(outs, clock)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchKind {
    BestOfN,
    SearchOverPath,
}

/// Search baseline over the evaluation set on the plain base.
pub fn search_set(ctx: &Ctx, base: &ParamSet, kind: SearchKind) -> Result<SampleSet> {
    let gen = ctx.plain(base);
    let set = ctx.eval_set();
    let clock = Instant::now();
    let w = ctx.cfg.train.reward;
    let outs = par_map(set.len(), |k| {
        let (cond, seed) = &set[k];
        let r = match kind {
            SearchKind::BestOfN => best_of_n(&gen, cond, ctx.cfg.search.bon_n, chunk_reward(w), *seed),
            SearchKind::SearchOverPath => search_over_path(&gen, cond, ctx.cfg.search.sop_k, chunk_reward(w), *seed),
        }?;
        Ok((r.video, r.overhead.counters))
    });
    collect(outs, clock)
}

pub fn metrics_of(ctx: &Ctx, set: &SampleSet) -> Result<SampleMetrics> {
    eval_metrics(&set.videos, &ctx.world, &ctx.cfg.train.reward, ctx.cfg.eval.dyn_interval)
}

/// Per-sample oracle log-lik, in evaluation-set order.
pub fn logliks(ctx: &Ctx, set: &SampleSet) -> Result<Vec<f64>> {
    set.videos.iter().map(|v| ctx.world.oracle_loglik(v)).collect()
}

/// Both samplers on the same base; writes `ode_vs_stochastic.dat`.
pub fn ode_vs_stochastic(ctx: &Ctx, base: &ParamSet, dir: &Path) -> Result<(SampleMetrics, SampleMetrics, PathBuf)> {
    let model = Model::plain(base.clone());
    let st = metrics_of(ctx, &sample_set(ctx, &model, SamplerKind::Stochastic)?)?;
    let ode = metrics_of(ctx, &sample_set(ctx, &model, SamplerKind::Ode)?)?;
    let path = super::plots::sampler_comparison(dir, &st, &ode)?;
    Ok((st, ode, path))
}

/// Refined-step subsets (single steps, then all-but-one) with both cache
/// blocks, then the reduced cache forms with every step, then the full
/// configuration last.
pub fn ablation_grid(schedule: &NoiseSchedule) -> Vec<(String, AblationConfig)> {
    let inter: Vec<u32> = schedule.raw_steps().iter().skip(1).copied().collect();
    let mut grid = Vec::new();
    let label = |s: &[u32]| s.iter().map(u32::to_string).collect::<Vec<_>>().join("+");
    let mut subsets: Vec<Vec<u32>> = inter.iter().map(|s| vec![*s]).collect();
    if inter.len() > 2 {
        for skip in 0..inter.len() {
            subsets.push(inter.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, s)| *s).collect());
        }
    }
    for s in subsets {
        grid.push((
            format!("steps:{}", label(&s)),
            AblationConfig {
                refined_steps: Some(s),
                ..AblationConfig::default()
            },
        ));
    }
    for (h, r) in [(false, false), (false, true), (true, false)] {
        grid.push((
            format!("cache:{}{}", if h { "history" } else { "" }, if r { "reflect" } else if h { "" } else { "none" }),
            AblationConfig {
                history: h,
                reflect: r,
                refined_steps: None,
            },
        ));
    }
    grid.push(("full".into(), AblationConfig::default()));
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub loglik: f64,
    /// Mean paired difference against the full configuration.
    pub diff_vs_full: f64,
    /// One-sided p-value that this configuration beats the full one.
    pub p_better_than_full: f64,
    pub samples: Vec<f64>,
}

/// Trains and evaluates every configuration of `grid` under one budget.
/// The full configuration is always included as the reference.
pub fn ablate(ctx: &Ctx, base: &ParamSet, grid: &[(String, AblationConfig)], mut progress: impl FnMut(&str, &MetricsRecord)) -> Result<Vec<AblationRow>> {
    let mut grid = grid.to_vec();
    if !grid.iter().any(|(_, a)| *a == AblationConfig::default()) {
        grid.push(("full".into(), AblationConfig::default()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for (label, a) in &grid {
        let flags = a.flags(&ctx.schedule)?;
        let tr = train_arm(ctx, base, Arm::Pathwise, ctx.cfg.train.clone(), flags, |r| progress(label, r))?;
        let set = sample_set(ctx, &Model::from_trainer(&tr)?, SamplerKind::Stochastic)?;
        scores.push(logliks(ctx, &set)?);
    }
    let full_idx = grid.iter().position(|(_, a)| *a == AblationConfig::default()).expect("inserted above");
    let full = scores[full_idx].clone();
    Ok(grid
        .iter()
        .zip(scores)
        .map(|((label, _), s)| {
            let (diff, p) = if s == full {
                (0.0, 1.0)
            } else {
                let t = paired_t(&s, &full);
                (t.mean_diff, t.p_greater)
            };
            AblationRow {
                label: label.clone(),
                loglik: mean(&s),
                diff_vs_full: diff,
                p_better_than_full: p,
                samples: s,
            }
        })
        .collect())
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text = String::from("config,loglik,diff_vs_full,p_better_than_full\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{}\n", r.label, r.loglik, r.diff_vs_full, r.p_better_than_full));
    }
    std::fs::write(path, text)?;
    Ok(())
}
