//! Run configuration: one TOML document with a section per component.
//! Every key is optional and unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::refiner::RefineFlags;
use crate::schedule::NoiseSchedule;
use crate::synthdata::WorldParams;
use crate::trainer::{Arm, PretrainConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Raw timesteps, first equal to `t_max`.
    pub steps: Vec<u32>,
    pub shift: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: vec![1000, 750, 500, 250],
            shift: 5.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_paper_steps(&self.steps, self.shift)
    }
}

/// Few-step self-distillation of the flow-matched base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// 0 skips distillation.
    pub steps: u64,
    pub lr: f64,
    /// `pretrain-base` fails when the base's mean oracle log-lik is lower.
    pub loglik_floor: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 2e-5,
            loglik_floor: -1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// The pathwise refiner itself.
    #[default]
    None,
    Lora,
    InitRefiner,
}

impl Baseline {
    pub fn arm(self) -> Arm {
        match self {
            Baseline::None => Arm::Pathwise,
            Baseline::Lora => Arm::Lora,
            Baseline::InitRefiner => Arm::InitRefiner,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    #[default]
    Stochastic,
    Ode,
}

/// Refined-step subset and refiner cache form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub history: bool,
    pub reflect: bool,
    /// Raw timesteps to refine; `None` refines every intermediate step.
    pub refined_steps: Option<Vec<u32>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            history: true,
            reflect: true,
            refined_steps: None,
        }
    }
}

impl AblationConfig {
    /// Translates raw timesteps into step indices (`T` first, 1 last).
    pub fn flags(&self, schedule: &NoiseSchedule) -> Result<RefineFlags> {
        let steps = match &self.refined_steps {
            None => None,
            Some(raw) => {
                let all = schedule.raw_steps();
                let t = all.len();
                let mut set = BTreeSet::new();
                for r in raw {
                    match all.iter().position(|a| a == r) {
                        Some(k) if k > 0 => {
                            set.insert(t - k);
                        }
                        _ => {
                            return Err(Error::Config(format!(
                                "refined step {r} is not an intermediate step of {all:?}"
                            )))
                        }
                    }
                }
                if set.is_empty() {
                    return Err(Error::Config("refined_steps is empty".into()));
                }
                Some(set)
            }
        };
        Ok(RefineFlags {
            history: self.history,
            reflect: self.reflect,
            steps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub conditions: usize,
    pub per_condition: usize,
    pub seed: u64,
    pub dyn_interval: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conditions: 25,
            per_condition: 2,
            seed: 1000,
            dyn_interval: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub bon_n: usize,
    pub sop_k: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { bon_n: 5, sop_k: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub baseline: Baseline,
    pub sampler: SamplerKind,
    pub world: WorldParams,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
    pub search: SearchConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        let d = &self.denoiser;
        if w.d != d.frame_dim || w.c != d.chunk_frames || w.modes + w.d != d.cond_dim {
            return Err(Error::Config(format!(
                "world (d={}, c={}, modes={}) does not match denoiser (frame_dim={}, chunk_frames={}, cond_dim={})",
                w.d, w.c, w.modes, d.frame_dim, d.chunk_frames, d.cond_dim
            )));
        }
        if w.n_chunks * w.c > d.max_frames {
            return Err(Error::Config("world frames exceed max_frames".into()));
        }
        d.validate()?;
        let sched = self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        self.ablation.flags(&sched)?;
        self.train.validate()?;
        if self.eval.conditions == 0 || self.eval.per_condition == 0 || self.eval.dyn_interval == 0 {
            return Err(Error::Config("eval counts and interval must be positive".into()));
        }
        if self.search.bon_n == 0 || self.search.sop_k == 0 {
            return Err(Error::Config("search candidate counts must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{DmdWeighting, Objective};
    use proptest::prelude::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["bogus = 1", "[train]\nlearning_rate = 0.1", "[world]\nd = 8\nextra = true", "[nosuch]"] {
            assert!(matches!(RunConfig::parse(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn mismatched_sections_are_rejected() {
        assert!(RunConfig::parse("[world]\nd = 6").is_err());
        assert!(RunConfig::parse("[ablation]\nrefined_steps = [1000]").is_err());
        assert!(RunConfig::parse("[ablation]\nrefined_steps = [600]").is_err());
        assert!(RunConfig::parse("[schedule]\nsteps = [900, 500]").is_err());
    }

    #[test]
    fn refined_steps_map_to_step_indices() {
        let s = ScheduleConfig::default().build().unwrap();
        let a = AblationConfig {
            refined_steps: Some(vec![750, 250]),
            ..AblationConfig::default()
        };
        assert_eq!(a.flags(&s).unwrap().steps.unwrap().into_iter().collect::<Vec<_>>(), vec![1, 3]);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e6..1e6f64, 1e-9..1e-3f64, Just(0.0)]
    }

    proptest! {
        #[test]
        fn randomized_configs_round_trip(
            seeds in prop::array::uniform4(0..i64::MAX as u64),
            lrs in prop::array::uniform4(finite()),
            reg in prop::option::of(finite()),
            steps in (0u64..100_000, 0u64..100_000, 0u64..100_000),
            flags in prop::array::uniform4(any::<bool>()),
            subset in prop::option::of(prop::sample::subsequence(vec![750u32, 500, 250], 1..=3)),
            baseline in prop_oneof![Just(Baseline::None), Just(Baseline::Lora), Just(Baseline::InitRefiner)],
            rho in 0.0..0.99f64,
        ) {
            let mut c = RunConfig::default();
            c.baseline = baseline;
            c.sampler = if flags[0] { SamplerKind::Ode } else { SamplerKind::Stochastic };
            c.world.seed = seeds[0];
            c.world.rho = rho;
            c.pretrain.seed = seeds[1];
            c.train.seed = seeds[2];
            c.eval.seed = seeds[3];
            c.pretrain.lr = lrs[0];
            c.train.lr = Some(lrs[1]);
            c.train.optim.beta2 = lrs[2];
            c.train.reward.alignment = lrs[3];
            c.train.reg_weight = reg;
            c.train.objective = if flags[1] { Objective::Reward } else { Objective::Dmd };
            c.train.dmd.weighting = if flags[2] { DmdWeighting::Score } else { DmdWeighting::Clean };
            c.train.dmd.fake_per_exit = flags[3];
            c.pretrain.steps = steps.0;
            c.train.steps = steps.1;
            c.distill.steps = steps.2;
            c.ablation.history = flags[1];
            c.ablation.reflect = flags[2];
            c.ablation.refined_steps = subset;
            let text = c.to_toml().unwrap();
            let back: RunConfig = toml::from_str(&text).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
