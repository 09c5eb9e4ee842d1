//! Command-line front end. Every subcommand reads one TOML config (all
//! keys optional), applies flag overrides and writes its outputs under
//! `--out`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{Baseline, RunConfig, SamplerKind};
use super::metrics::{self, eval_record, Format, MetricsRecord};
use super::plots;
use super::run::{self, ArmParams, Ctx, Model, SampleSet, SearchKind};
use super::selfcheck;
use crate::objectives::Objective;
use crate::sampler::Counters;
use crate::synthdata::LatentSequence;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "arfn", version, about = "Pathwise noise refinement on synthetic latent video")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the pretraining, training and evaluation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Dmd,
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SearchMethod {
    Bon,
    Sop,
}

#[derive(Debug, Clone, Args, Default)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Raw timesteps to refine, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub refined_steps: Option<Vec<u32>>,
    /// Base checkpoint; defaults to `<out>/base.ckpt`.
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Trained arm checkpoint; omitted means the base alone.
    #[arg(long, conflicts_with = "base_only")]
    pub refiner: Option<PathBuf>,
    /// Ignore `<out>/refiner.ckpt` even when present.
    #[arg(long)]
    pub base_only: bool,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerKind>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Flow-matching pretraining and few-step distillation of the base.
    PretrainBase {
        /// Pretraining steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Trains a refiner (or a baseline arm) on the frozen base.
    TrainRefiner(TrainArgs),
    /// Samples the evaluation set to `<out>/samples.json`.
    Sample(ModelArgs),
    /// Evaluates saved samples, or samples afresh when none are given.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Row label in the method plots.
        #[arg(long)]
        label: Option<String>,
        /// Also compare the stochastic and ODE samplers on the base.
        #[arg(long)]
        compare_samplers: bool,
    },
    /// Inference-time search baselines on the base.
    Search {
        #[arg(long, value_enum, default_value = "bon")]
        method: SearchMethod,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Refined-step and cache-form ablations against the full refiner.
    Ablate(TrainArgs),
    /// Finite-difference and cached-attention checks.
    Selfcheck {
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Schedule(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

/// Parses `argv` and runs it; returns the exit code.
pub fn main_with(argv: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        if s > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {s} does not fit a config file (max 2^63 − 1)")));
        }
        cfg.pretrain.seed = s;
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(o) = a.objective {
        cfg.train.objective = match o {
            ObjectiveArg::Dmd => Objective::Dmd,
            ObjectiveArg::Reward => Objective::Reward,
        };
    }
    if let Some(b) = a.baseline {
        cfg.baseline = b;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(r) = &a.refined_steps {
        cfg.ablation.refined_steps = Some(r.clone());
    }
}

fn base_path(out: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join("base.ckpt"))
}

fn load_base(out: &Path, explicit: &Option<PathBuf>) -> Result<crate::denoiser::ParamSet> {
    let p = base_path(out, explicit);
    checkpoint::load(&p).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io} (run pretrain-base first)", p.display())),
        e => e,
    })
}

fn write_metrics(out: &Path, stem: &str, format: Format, records: &[MetricsRecord]) -> Result<PathBuf> {
    let path = out.join(format!("{stem}.{}", format.ext()));
    metrics::append(&path, format, records)?;
    Ok(path)
}

/// Sample files hold only deterministic content; timing lives beside them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleFile {
    pub label: String,
    pub counters: Counters,
    pub videos: Vec<LatentSequence>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Timing {
    wall_ms: f64,
}

fn timing_path(samples: &Path) -> PathBuf {
    samples.with_extension("timing.json")
}

fn save_samples(path: &Path, label: &str, set: &SampleSet) -> Result<()> {
    let file = SampleFile {
        label: label.into(),
        counters: set.counters,
        videos: set.videos.clone(),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, json)?;
    let t = serde_json::to_string(&Timing { wall_ms: set.wall_ms }).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(timing_path(path), t)?;
    Ok(())
}

fn load_samples(path: &Path) -> Result<(SampleFile, f64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let file: SampleFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let wall = std::fs::read_to_string(timing_path(path))
        .ok()
        .and_then(|t| serde_json::from_str::<Timing>(&t).ok())
        .map_or(0.0, |t| t.wall_ms);
    Ok((file, wall))
}

/// Arm checkpoints carry the config they were trained under beside them.
fn arm_config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("toml")
}

fn load_model(ctx: &Ctx, out: &Path, m: &ModelArgs) -> Result<(Model, String)> {
    let base = load_base(out, &m.base)?;
    let default = out.join("refiner.ckpt");
    let path = match (&m.refiner, m.base_only) {
        (Some(p), _) => Some(p.clone()),
        (None, false) if default.exists() => Some(default),
        _ => None,
    };
    let Some(path) = path else {
        return Ok((Model::plain(base), "base".into()));
    };
    let params = ArmParams::from_params(&checkpoint::load(&path)?)?;
    let trained = RunConfig::load(&arm_config_path(&path))?;
    let flags = trained.ablation.flags(&ctx.schedule)?;
    let label = arm_label(&trained);
    Ok((
        Model {
            base,
            arm: Some((trained.baseline.arm(), params)),
            flags,
        },
        label,
    ))
}

fn arm_label(cfg: &RunConfig) -> String {
    let arm = match cfg.baseline {
        Baseline::None => "pathwise",
        Baseline::Lora => "lora",
        Baseline::InitRefiner => "init-refiner",
    };
    let obj = match cfg.train.objective {
        Objective::Dmd => "dmd",
        Objective::Reward => "reward",
    };
    format!("{arm}-{obj}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Labelled {
    label: String,
    record: MetricsRecord,
}

/// Appends a labelled evaluation row and regenerates the method plots
/// from every row so far.
fn record_method(out: &Path, label: &str, record: &MetricsRecord) -> Result<()> {
    let log = out.join("methods.jsonl");
    let mut rows: Vec<(String, MetricsRecord)> = match std::fs::read_to_string(&log) {
        Ok(t) => t
            .lines()
            .map(|l| serde_json::from_str::<Labelled>(l).map(|r| (r.label, r.record)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("{}: {e}", log.display())))?,
        Err(_) => Vec::new(),
    };
    let line = serde_json::to_string(&Labelled {
        label: label.into(),
        record: record.clone(),
    })
    .map_err(|e| Error::Invalid(e.to_string()))?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&log)?;
    std::io::Write::write_all(&mut f, format!("{line}\n").as_bytes())?;
    rows.push((label.into(), record.clone()));
    plots::method_plots(&out.join("plots"), &rows)?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = load_config(c)?;
    let out = &c.out;
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::PretrainBase { steps } => {
            if let Some(s) = steps {
                cfg.pretrain.steps = *s;
            }
            let ctx = Ctx::new(cfg)?;
            let mut recs = Vec::new();
            let base = run::pretrain_base(&ctx, |r| {
                if r.step % 100 == 0 {
                    eprintln!("{} step {}: {:.5}", r.objective, r.step, r.fidelity);
                }
                recs.push(r.clone());
            })?;
            checkpoint::save(&out.join("base.ckpt"), &base)?;
            write_metrics(out, "pretrain", c.format, &recs)?;
            for obj in ["flow", "distill"] {
                let part: Vec<_> = recs.iter().filter(|r| r.objective == obj).cloned().collect();
                if !part.is_empty() {
                    plots::training_curve(&out.join("plots"), &format!("training_{obj}.dat"), &part)?;
                }
            }
            let set = run::sample_set(&ctx, &Model::plain(base), SamplerKind::Stochastic)?;
            let m = run::metrics_of(&ctx, &set)?;
            println!("base log-lik {:.3} (floor {})", m.loglik, ctx.cfg.distill.loglik_floor);
            if m.loglik < ctx.cfg.distill.loglik_floor {
                return Err(Error::Config(format!("base log-lik {} is below the configured floor", m.loglik)));
            }
            ctx.cfg.to_toml().and_then(|t| Ok(std::fs::write(out.join("base.toml"), t)?))?;
        }
        Command::TrainRefiner(a) => {
            apply_train(&mut cfg, a);
            let ctx = Ctx::new(cfg)?;
            let base = load_base(out, &a.base)?;
            let flags = ctx.cfg.ablation.flags(&ctx.schedule)?;
            let label = arm_label(&ctx.cfg);
            let mut recs = Vec::new();
            let tr = run::train_arm(&ctx, &base, ctx.cfg.baseline.arm(), ctx.cfg.train.clone(), flags, |r| {
                if r.step % 50 == 0 {
                    eprintln!("{label} step {}: fidelity {:.5} reward {:.5}", r.step, r.fidelity, r.reward);
                }
                recs.push(r.clone());
            })?;
            let model = Model::from_trainer(&tr)?;
            let (_, params) = model.arm.as_ref().ok_or_else(|| Error::Invalid("nothing trained".into()))?;
            let ckpt = out.join("refiner.ckpt");
            checkpoint::save(&ckpt, &params.to_params())?;
            std::fs::write(arm_config_path(&ckpt), ctx.cfg.to_toml()?)?;
            write_metrics(out, &format!("train_{label}"), c.format, &recs)?;
            if !recs.is_empty() {
                plots::training_curve(&out.join("plots"), &format!("training_{label}.dat"), &recs)?;
            }
        }
        Command::Sample(m) => {
            if let Some(s) = m.sampler {
                cfg.sampler = s;
            }
            let ctx = Ctx::new(cfg)?;
            let (model, label) = load_model(&ctx, out, m)?;
            let set = run::sample_set(&ctx, &model, ctx.cfg.sampler)?;
            save_samples(&out.join("samples.json"), &label, &set)?;
        }
        Command::Eval {
            model: m,
            samples,
            label,
            compare_samplers,
        } => {
            if let Some(s) = m.sampler {
                cfg.sampler = s;
            }
            let ctx = Ctx::new(cfg)?;
            let (file, wall) = match samples {
                Some(p) => load_samples(p)?,
                None => {
                    let (model, label) = load_model(&ctx, out, m)?;
                    let set = run::sample_set(&ctx, &model, ctx.cfg.sampler)?;
                    let f = SampleFile {
                        label,
                        counters: set.counters,
                        videos: set.videos,
                    };
                    (f, set.wall_ms)
                }
            };
            let sm = metrics::eval_metrics(&file.videos, &ctx.world, &ctx.cfg.train.reward, ctx.cfg.eval.dyn_interval)?;
            let label = label.clone().unwrap_or(file.label);
            let rec = eval_record(0, &label, &sm, &file.counters, wall);
            write_metrics(out, "eval", c.format, std::slice::from_ref(&rec))?;
            record_method(out, &label, &rec)?;
            println!(
                "{label}: log-lik {:.3} reward {:.4} diversity {:.4} dynamic {:.4} nfe {} verify {}",
                sm.loglik, sm.reward, sm.diversity, sm.dynamic_degree, rec.nfe, rec.verify_count
            );
            if *compare_samplers {
                let base = load_base(out, &m.base)?;
                let (st, ode, _) = run::ode_vs_stochastic(&ctx, &base, &out.join("plots"))?;
                println!("stochastic log-lik {:.3}, ode log-lik {:.3}", st.loglik, ode.loglik);
            }
        }
        Command::Search { method, base } => {
            let ctx = Ctx::new(cfg)?;
            let base = load_base(out, base)?;
            let (kind, label) = match method {
                SearchMethod::Bon => (SearchKind::BestOfN, format!("bon{}", ctx.cfg.search.bon_n)),
                SearchMethod::Sop => (SearchKind::SearchOverPath, format!("sop{}", ctx.cfg.search.sop_k)),
            };
            let set = run::search_set(&ctx, &base, kind)?;
            save_samples(&out.join(format!("samples_{label}.json")), &label, &set)?;
            let sm = run::metrics_of(&ctx, &set)?;
            let rec = eval_record(0, &label, &sm, &set.counters, set.wall_ms);
            write_metrics(out, "eval", c.format, std::slice::from_ref(&rec))?;
            record_method(out, &label, &rec)?;
            println!("{label}: log-lik {:.3} reward {:.4} nfe {} verify {}", sm.loglik, sm.reward, rec.nfe, rec.verify_count);
        }
        Command::Ablate(a) => {
            let only = a.refined_steps.clone();
            apply_train(&mut cfg, &TrainArgs { refined_steps: None, ..a.clone() });
            let ctx = Ctx::new(cfg)?;
            let base = load_base(out, &a.base)?;
            let grid = match only {
                Some(steps) => {
                    let a = super::config::AblationConfig {
                        refined_steps: Some(steps.clone()),
                        ..ctx.cfg.ablation.clone()
                    };
                    a.flags(&ctx.schedule)?;
                    let label = steps.iter().map(u32::to_string).collect::<Vec<_>>().join("+");
                    vec![(format!("steps:{label}"), a)]
                }
                None => run::ablation_grid(&ctx.schedule),
            };
            let mut recs = Vec::new();
            let clock = Instant::now();
            let rows = run::ablate(&ctx, &base, &grid, |label, r| {
                if r.step % 100 == 0 {
                    eprintln!("{label} step {}", r.step);
                }
                recs.push(MetricsRecord {
                    objective: format!("{}@{label}", r.objective),
                    ..r.clone()
                });
            })?;
            write_metrics(out, "ablate_train", c.format, &recs)?;
            run::write_ablation(&out.join("ablation.csv"), &rows)?;
            for r in &rows {
                println!("{:<24} log-lik {:>9.3}  Δ vs full {:>8.3}  p(better) {:.4}", r.label, r.loglik, r.diff_vs_full, r.p_better_than_full);
            }
            eprintln!("ablation took {:.1} s", clock.elapsed().as_secs_f64());
        }
        Command::Selfcheck { base } => {
            let ctx = Ctx::new(cfg)?;
            let params = match base {
                Some(p) => Some(checkpoint::load(p)?),
                None => None,
            };
            let r = selfcheck::run(&ctx.cfg.denoiser, params.as_ref(), ctx.cfg.train.seed)?;
            for (name, e) in &r.ops {
                println!("{} fd {name:<16} {e:.3e}", if *e < selfcheck::FD_TOL { "ok  " } else { "FAIL" });
            }
            println!("{} kv-equivalence   {:.3e}", if r.kv_max_diff < selfcheck::KV_TOL { "ok  " } else { "FAIL" }, r.kv_max_diff);
            if !r.passed() {
                return Err(Error::Check("self-check tolerances exceeded".into()));
            }
        }
    }
    Ok(())
}
