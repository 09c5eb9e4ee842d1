//! Training signals for the refiner: distribution matching against the
//! analytic data score, the latent reward, and their combination with the
//! residual penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Binding, Bound, DenoiserConfig, Group, ParamSet, TokenRole};
use crate::diffnum::{Tape, Var};
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::rng;
use crate::synthdata::{Condition, World};
use crate::trainer::{AdamW, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dmd,
    Reward,
}

impl Objective {
    pub fn from_flags(dmd: bool, reward: bool) -> Result<Self> {
        match (dmd, reward) {
            (true, false) => Ok(Self::Dmd),
            (false, true) => Ok(Self::Reward),
            (true, true) => Err(Error::Config("dmd and reward objectives are mutually exclusive".into())),
            (false, false) => Err(Error::Config("no objective selected".into())),
        }
    }

    /// Residual penalty used when none is configured.
    pub fn default_reg(self) -> f64 {
        match self {
            Self::Dmd => 0.0,
            Self::Reward => 0.01,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Self::Dmd => 1e-4,
            Self::Reward => 2e-5,
        }
    }
}

/// Per-draw scaling of the score gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DmdWeighting {
    /// The raw gap `ŝ_fake − s_real`.
    Score,
    /// The gap expressed as a clean-space difference `x̂_fake − x̂_real`
    /// (a factor `σ²/(1−σ)`), divided by the mean `|x − x̂_real|`.
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmdConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Divide the surrogate by the element count of a sample.
    pub normalize: bool,
    pub weighting: DmdWeighting,
    /// Fake-score updates per generator update.
    pub k_fake: usize,
    pub fake_lr: f64,
    /// One fake score per exit step `s` instead of a single shared one.
    pub fake_per_exit: bool,
}

impl Default for DmdConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.02,
            sigma_max: 0.98,
            normalize: true,
            weighting: DmdWeighting::Clean,
            k_fake: 5,
            fake_lr: 1e-3,
            fake_per_exit: true,
        }
    }
}

impl DmdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sigma_min && self.sigma_min <= self.sigma_max && self.sigma_max < 1.0) {
            return Err(Error::Config(format!(
                "DMD sigma range [{}, {}] must lie inside (0, 1)",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn sample_sigma(&self, rng: &mut impl Rng) -> f64 {
        if self.sigma_min == self.sigma_max {
            self.sigma_min
        } else {
            rng.random_range(self.sigma_min..self.sigma_max)
        }
    }
}

/// `⟨sg(gap)/m, Ψ(x, ε, σ)⟩`, where `gap = ŝ_fake − s_real` at `Ψ(x, ε, σ)`.
/// Returns the surrogate and the noised point (a node on the tape).
pub fn dmd_surrogate_with_gap(tape: &mut Tape, x: Var, sigma: f64, eps: &[f64], gap: &[f64], normalize: bool) -> Result<(Var, Var)> {
    if !(0.0 < sigma && sigma < 1.0) {
        return Err(Error::Invalid(format!("DMD sigma {sigma} outside (0, 1)")));
    }
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    if eps.len() != n || gap.len() != n {
        return Err(Error::shape("dmd_surrogate", &[n], &[eps.len().min(gap.len())]));
    }
    let m = if normalize { n as f64 } else { 1.0 };
    let e = tape.constant(eps.to_vec(), &shape)?;
    let xs = crate::schedule::forward_diffuse_var(tape, x, e, sigma)?;
    let g = tape.constant(gap.iter().map(|v| v / m).collect(), &shape)?;
    let prod = tape.mul(g, xs)?;
    Ok((tape.sum(prod)?, xs))
}

/// Applies `weighting` to a score gap measured at `x_σ` for the clean
/// sample `x`, given the real score there.
pub fn weight_gap(weighting: DmdWeighting, gap: &mut [f64], x: &[f64], xs: &[f64], real: &[f64], sigma: f64) {
    if weighting == DmdWeighting::Score {
        return;
    }
    let k = sigma * sigma / (1.0 - sigma);
    let dev: f64 = x
        .iter()
        .zip(xs)
        .zip(real)
        .map(|((a, b), r)| (a - (b + sigma * sigma * r) / (1.0 - sigma)).abs())
        .sum::<f64>()
        / x.len() as f64;
    let w = k / dev.max(1e-8);
    gap.iter_mut().for_each(|g| *g *= w);
}

/// DMD surrogate with explicit score functions evaluated at the noised
/// point. Scores see only values, so no gradient reaches them.
pub fn dmd_surrogate_loss(
    tape: &mut Tape,
    x: Var,
    sigma: f64,
    eps: &[f64],
    real_score: impl Fn(&[f64], f64) -> Result<Vec<f64>>,
    fake_score: impl Fn(&[f64], f64) -> Result<Vec<f64>>,
    normalize: bool,
) -> Result<Var> {
    if !(0.0 < sigma && sigma < 1.0) {
        return Err(Error::Invalid(format!("DMD sigma {sigma} outside (0, 1)")));
    }
    let xv = tape.value(x).to_vec();
    if eps.len() != xv.len() {
        return Err(Error::shape("dmd_surrogate", &[xv.len()], &[eps.len()]));
    }
    let xs: Vec<f64> = xv.iter().zip(eps).map(|(a, e)| (1.0 - sigma) * a + sigma * e).collect();
    let sr = real_score(&xs, sigma)?;
    let sf = fake_score(&xs, sigma)?;
    let gap: Vec<f64> = sf.iter().zip(&sr).map(|(f, r)| f - r).collect();
    Ok(dmd_surrogate_with_gap(tape, x, sigma, eps, &gap, normalize)?.0)
}

/// Score implied by a velocity prediction under the Gaussian forward
/// kernel: `−(x_σ − (1−σ)·x̂₀)/σ²` with `x̂₀ = x_σ + σ·v`.
pub fn score_from_velocity(x: &[f64], v: &[f64], sigma: f64) -> Vec<f64> {
    x.iter()
        .zip(v)
        .map(|(xs, vv)| {
            let x0 = xs + sigma * vv;
            -(xs - (1.0 - sigma) * x0) / (sigma * sigma)
        })
        .collect()
}

/// Velocity whose implied score is `s`.
pub fn velocity_from_score(x: &[f64], s: &[f64], sigma: f64) -> Vec<f64> {
    // x̂₀ = (x_σ + σ²s)/(1−σ), v = (x̂₀ − x_σ)/σ.
    x.iter()
        .zip(s)
        .map(|(xs, sc)| ((xs + sigma * sigma * sc) / (1.0 - sigma) - xs) / sigma)
        .collect()
}

/// Full-sequence score model of the generator's output distribution.
///
/// With an anchor world, the network predicts a correction to the exact
/// data velocity, so an untrained model implies `ŝ_fake = s_real` and the
/// score gap is `(1−σ)·v_net/σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeScoreModel {
    pub cfg: DenoiserConfig,
    pub params: ParamSet,
    pub anchored: bool,
    pub opt: AdamW,
}

impl FakeScoreModel {
    pub fn new(cfg: DenoiserConfig, anchored: bool, lr: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut params = cfg.init_params(rng)?;
        if anchored {
            for name in ["out.w", "out.b", "out.skip"] {
                params.get_mut(name)?.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let opt = AdamW::new(OptimConfig {
            lr,
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        Ok(Self {
            cfg,
            params,
            anchored,
            opt,
        })
    }

    fn net(&self, tape: &mut Tape, bound: &Bound, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Var> {
        let d = self.cfg.frame_dim;
        let xv = tape.constant(x.to_vec(), &[x.len() / d, d])?;
        let g = Group {
            x: xv,
            sigma,
            role: TokenRole::Noisy,
            start: 0,
            sees: vec![],
        };
        Ok(bound.forward_grouped(tape, cond, &[g])?[0])
    }

    /// Network output `v_net` at a noised sequence.
    pub fn net_velocity(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let b = Bound::bind(&mut tape, &self.cfg, Binding::frozen(&self.params))?;
        let v = self.net(&mut tape, &b, x, sigma, cond)?;
        Ok(tape.value(v).to_vec())
    }

    fn anchor_velocity(world: Option<&World>, x: &[f64], sigma: f64, mode: usize) -> Result<Vec<f64>> {
        match world {
            Some(w) => Ok(velocity_from_score(x, &w.noised_score(x, sigma, Some(mode))?, sigma)),
            None => Ok(vec![0.0; x.len()]),
        }
    }

    fn require_anchor(&self, world: Option<&World>) -> Result<()> {
        if self.anchored && world.is_none() {
            return Err(Error::Invalid("anchored fake score needs its world".into()));
        }
        Ok(())
    }

    /// `ŝ_fake(x_σ, σ)`.
    pub fn score(&self, world: Option<&World>, x: &[f64], sigma: f64, cond: &Condition) -> Result<Vec<f64>> {
        self.require_anchor(world)?;
        let cv = cond.vector(self.cfg.cond_dim - self.cfg.frame_dim);
        let mut v = self.net_velocity(x, sigma, &cv)?;
        if self.anchored {
            let va = Self::anchor_velocity(world, x, sigma, cond.mode)?;
            v.iter_mut().zip(&va).for_each(|(a, b)| *a += b);
        }
        Ok(score_from_velocity(x, &v, sigma))
    }

    /// `ŝ_fake − s_real` at a noised sequence, for an anchored model.
    pub fn score_gap(&self, x: &[f64], sigma: f64, cond: &Condition) -> Result<Vec<f64>> {
        if !self.anchored {
            return Err(Error::Invalid("score_gap needs an anchored model".into()));
        }
        let cv = cond.vector(self.cfg.cond_dim - self.cfg.frame_dim);
        let v = self.net_velocity(x, sigma, &cv)?;
        Ok(v.iter().map(|u| (1.0 - sigma) * u / sigma).collect())
    }
}

/// Sigma draw for one fake-score sample.
pub enum FakeSigma<'a> {
    Fixed(f64),
    Range(&'a DmdConfig),
}

/// One flow-matching step of the fake score on detached generator
/// outputs; returns the mean squared velocity error before the step.
pub fn fake_score_update(
    fake: &mut FakeScoreModel,
    world: Option<&World>,
    batch: &[(Frames, Condition)],
    sigma: FakeSigma<'_>,
    rng: &mut impl Rng,
) -> Result<f64> {
    fake.require_anchor(world)?;
    if batch.is_empty() {
        return Err(Error::Invalid("empty fake-score batch".into()));
    }
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &fake.cfg, Binding {
        base: &fake.params,
        base_trainable: true,
        lora: None,
        head: None,
    })?;
    let mut terms = Vec::with_capacity(batch.len());
    for (x, cond) in batch {
        let s = match sigma {
            FakeSigma::Fixed(s) => s,
            FakeSigma::Range(c) => c.sample_sigma(rng),
        };
        let eps = rng::normal_vec(rng, x.data.len());
        let xs: Vec<f64> = x.data.iter().zip(&eps).map(|(a, e)| (1.0 - s) * a + s * e).collect();
        let target: Vec<f64> = x.data.iter().zip(&eps).map(|(a, e)| a - e).collect();
        let anchor = FakeScoreModel::anchor_velocity(if fake.anchored { world } else { None }, &xs, s, cond.mode)?;
        let resid: Vec<f64> = target.iter().zip(&anchor).map(|(t, a)| t - a).collect();
        let cv = cond.vector(fake.cfg.cond_dim - fake.cfg.frame_dim);
        let v = fake.net(&mut tape, &b, &xs, s, &cv)?;
        let r = tape.constant(resid, &[x.rows, x.dim])?;
        let diff = tape.sub(v, r)?;
        terms.push(tape.sq_norm(diff)?);
    }
    let n: usize = batch.iter().map(|(x, _)| x.data.len()).sum();
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    let loss = tape.scale(total, 1.0 / n as f64)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("fake-score loss".into()));
    }
    let grads = tape.backward(loss)?;
    let g: Vec<(String, Vec<f64>)> = b.trainable.iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect();
    let params: Vec<(String, &mut crate::denoiser::Tensor)> = fake
        .params
        .tensors
        .iter_mut()
        .map(|(k, t)| (format!("base.{k}"), t))
        .collect();
    fake.opt.step(params, &g)?;
    Ok(value)
}

/// `−fidelity + reg·Σ ½‖Δε‖²`. Exactly one of `dmd` (a surrogate, i.e.
/// negated fidelity) and `reward` must be given.
pub fn refiner_loss(tape: &mut Tape, dmd: Option<Var>, reward: Option<Var>, deltas: &[Var], reg_weight: f64) -> Result<Var> {
    let neg_fid = match (dmd, reward) {
        (Some(s), None) => s,
        (None, Some(r)) => tape.scale(r, -1.0)?,
        (Some(_), Some(_)) => return Err(Error::Config("dmd and reward objectives are mutually exclusive".into())),
        (None, None) => return Err(Error::Config("no objective selected".into())),
    };
    if reg_weight < 0.0 || !reg_weight.is_finite() {
        return Err(Error::Config(format!("reg weight {reg_weight} must be finite and ≥ 0")));
    }
    let mut loss = neg_fid;
    if reg_weight > 0.0 {
        for d in deltas {
            let r = crate::refiner::regularizer(tape, *d)?;
            let r = tape.scale(r, reg_weight)?;
            loss = tape.add(loss, r)?;
        }
    }
    Ok(loss)
}
