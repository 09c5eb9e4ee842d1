//! Few-step noise schedule, forward diffusion and clean prediction.
//!
//! Noise fractions `σ ∈ (0, 1]` are the internal coordinate. Integer steps
//! (`1000, 750, ...`) only appear at the I/O boundary. Under the
//! rectified-flow convention the signal coefficient is `α = 1 − σ`.

use serde::{Deserialize, Serialize};

use crate::diffnum::{Tape, Var};
use crate::error::{Error, Result};
use crate::frames::Frames;

pub const DEFAULT_T_MAX: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    raw_steps: Vec<u32>,
    sigmas: Vec<f64>,
    shift: f64,
    t_max: u32,
}

/// Flow-shift map `s·σ / (1 + (s − 1)·σ)`.
pub fn shift_sigma(sigma: f64, shift: f64) -> f64 {
    if sigma == 1.0 {
        return 1.0;
    }
    shift * sigma / (1.0 + (shift - 1.0) * sigma)
}

impl NoiseSchedule {
    pub fn from_paper_steps(raw_steps: &[u32], shift: f64) -> Result<Self> {
        Self::with_t_max(raw_steps, shift, DEFAULT_T_MAX)
    }

    pub fn with_t_max(raw_steps: &[u32], shift: f64, t_max: u32) -> Result<Self> {
        if !(shift > 0.0) || !shift.is_finite() {
            return Err(Error::Schedule(format!("shift must be positive, got {shift}")));
        }
        if raw_steps.is_empty() {
            return Err(Error::Schedule("no steps".into()));
        }
        if raw_steps[0] != t_max {
            return Err(Error::Schedule(format!(
                "first step must equal t_max={t_max}, got {}",
                raw_steps[0]
            )));
        }
        if raw_steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Schedule(format!("steps must be strictly descending: {raw_steps:?}")));
        }
        if raw_steps.iter().any(|&s| s == 0 || s > t_max) {
            return Err(Error::Schedule(format!("steps must lie in (0, {t_max}]")));
        }
        let sigmas = raw_steps
            .iter()
            .map(|&s| {
                if s == t_max {
                    1.0
                } else {
                    shift_sigma(s as f64 / t_max as f64, shift)
                }
            })
            .collect();
        Ok(Self {
            raw_steps: raw_steps.to_vec(),
            sigmas,
            shift,
            t_max,
        })
    }

    /// Four steps `[1000, 750, 500, 250]` with shift 5.
    pub fn default_toy() -> Self {
        Self::from_paper_steps(&[1000, 750, 500, 250], 5.0).expect("valid default schedule")
    }

    /// Number of denoising steps `T`.
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// Noise levels in sampling order; the first is exactly 1.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn raw_steps(&self) -> &[u32] {
        &self.raw_steps
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn t_max(&self) -> u32 {
        self.t_max
    }

    /// σ at step index `j ∈ {1..T}`, counted so that `j = T` is the first
    /// (pure-noise) step and `j = 1` the last.
    pub fn sigma_at(&self, j: usize) -> f64 {
        self.sigmas[self.len() - j]
    }

    /// Integer timestep at step index `j` (same counting as [`sigma_at`]).
    ///
    /// [`sigma_at`]: NoiseSchedule::sigma_at
    pub fn raw_at(&self, j: usize) -> u32 {
        self.raw_steps[self.len() - j]
    }

    /// Step index for an integer timestep, if it belongs to the schedule.
    pub fn index_of_raw(&self, raw: u32) -> Option<usize> {
        self.raw_steps.iter().position(|&s| s == raw).map(|p| self.len() - p)
    }
}

fn check_sigma(sigma: f64, open_zero: bool) -> Result<()> {
    let ok = if open_zero {
        sigma > 0.0 && sigma <= 1.0
    } else {
        (0.0..=1.0).contains(&sigma)
    };
    if !ok {
        return Err(Error::Invalid(format!("sigma {sigma} outside the admissible range")));
    }
    Ok(())
}

/// `(1 − σ)·x0 + σ·eps`.
pub fn forward_diffuse(x0: &Frames, eps: &Frames, sigma: f64) -> Result<Frames> {
    x0.check_same(eps, "forward_diffuse")?;
    check_sigma(sigma, false)?;
    let a = 1.0 - sigma;
    Ok(Frames {
        rows: x0.rows,
        dim: x0.dim,
        data: x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + sigma * e).collect(),
    })
}

/// `x_noisy + σ·velocity`.
pub fn predict_clean(x_noisy: &Frames, velocity: &Frames, sigma: f64) -> Result<Frames> {
    x_noisy.check_same(velocity, "predict_clean")?;
    check_sigma(sigma, true)?;
    Ok(Frames {
        rows: x_noisy.rows,
        dim: x_noisy.dim,
        data: x_noisy.data.iter().zip(&velocity.data).map(|(x, v)| x + sigma * v).collect(),
    })
}

/// Tape version of [`forward_diffuse`].
pub fn forward_diffuse_var(tape: &mut Tape, x0: Var, eps: Var, sigma: f64) -> Result<Var> {
    check_sigma(sigma, false)?;
    let a = tape.scale(x0, 1.0 - sigma)?;
    let b = tape.scale(eps, sigma)?;
    Ok(tape.add(a, b)?)
}

/// Tape version of [`predict_clean`].
pub fn predict_clean_var(tape: &mut Tape, x_noisy: Var, velocity: Var, sigma: f64) -> Result<Var> {
    check_sigma(sigma, true)?;
    let s = tape.scale(velocity, sigma)?;
    Ok(tape.add(x_noisy, s)?)
}
