//! Synthetic latent videos with exact densities.
//!
//! Each mode is a linear-Gaussian autoregression over frames, so the
//! flattened sequence of every mode is one multivariate Gaussian and the
//! whole world is a Gaussian mixture. Noised scores and log-densities are
//! evaluated in the eigenbasis of each component covariance; noising only
//! changes the eigenvalues (`(1−σ)²λ + σ²`), never the basis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{Tape, Var};
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::rng::{self, Role};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Generator parameters for a [`WorldSpec`]; this is what configs store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub d: usize,
    pub c: usize,
    pub n_chunks: usize,
    pub modes: usize,
    /// Spectral radius of every transition matrix.
    pub rho: f64,
    /// Norm of each drift vector.
    pub drift: f64,
    pub q: f64,
    pub p0: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            d: 8,
            c: 3,
            n_chunks: 7,
            modes: 3,
            rho: 0.8,
            drift: 1.0,
            q: 0.3,
            p0: 1.0,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    /// `d × d`, row-major.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub d: usize,
    pub c: usize,
    pub n_chunks: usize,
    pub modes: Vec<ModeSpec>,
    pub p0: f64,
    pub weights: Vec<f64>,
}

impl WorldSpec {
    /// Draws `A_k = ρ·Q_k` with `Q_k` orthogonal and drifts of fixed norm.
    pub fn generate(p: &WorldParams) -> Result<Self> {
        if p.d == 0 || p.c == 0 || p.n_chunks == 0 || p.modes == 0 {
            return Err(Error::Config("world dimensions must be positive".into()));
        }
        let mut r = rng::stream(p.seed, 0, 0, Role::Init);
        let modes = (0..p.modes)
            .map(|_| {
                let g = DMatrix::from_vec(p.d, p.d, rng::normal_vec(&mut r, p.d * p.d));
                let qr = g.qr();
                let mut q = qr.q();
                // Fix column signs so the draw is a proper Haar sample.
                let rdiag = qr.r().diagonal();
                for j in 0..p.d {
                    if rdiag[j] < 0.0 {
                        q.column_mut(j).neg_mut();
                    }
                }
                let a = q * p.rho;
                let mut b = rng::normal_vec(&mut r, p.d);
                let n = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                b.iter_mut().for_each(|x| *x *= p.drift / n);
                ModeSpec {
                    a: row_major(&a),
                    b,
                    q: p.q,
                }
            })
            .collect();
        let spec = Self {
            d: p.d,
            c: p.c,
            n_chunks: p.n_chunks,
            modes,
            p0: p.p0,
            weights: vec![1.0 / p.modes as f64; p.modes],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn frames(&self) -> usize {
        self.c * self.n_chunks
    }

    /// Flattened sequence length.
    pub fn numel(&self) -> usize {
        self.frames() * self.d
    }

    /// One-hot mode block plus a `d`-dimensional direction.
    pub fn cond_dim(&self) -> usize {
        self.modes.len() + self.d
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0) {
            return Err(Error::Config("p0 must be positive".into()));
        }
        let wsum: f64 = self.weights.iter().sum();
        if self.weights.len() != self.modes.len() || self.weights.iter().any(|&w| !(w > 0.0)) || (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mode weights must be positive and sum to 1".into()));
        }
        for (k, m) in self.modes.iter().enumerate() {
            if m.a.len() != self.d * self.d || m.b.len() != self.d {
                return Err(Error::Config(format!("mode {k}: wrong parameter sizes")));
            }
            if !(m.q > 0.0) {
                return Err(Error::Config(format!("mode {k}: q must be positive")));
            }
            let a = DMatrix::from_row_slice(self.d, self.d, &m.a);
            let radius = a
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            if radius >= 1.0 {
                return Err(Error::Config(format!("mode {k}: spectral radius {radius} ≥ 1")));
            }
        }
        Ok(())
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub mode: usize,
    /// Unit-norm target direction in frame space.
    pub direction: Vec<f64>,
}

impl Condition {
    pub fn new(mode: usize, direction: Vec<f64>) -> Result<Self> {
        let n = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::Invalid("condition direction must be nonzero".into()));
        }
        Ok(Self {
            mode,
            direction: direction.into_iter().map(|x| x / n).collect(),
        })
    }

    pub fn random(spec: &WorldSpec, rng: &mut impl Rng) -> Self {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut mode = spec.weights.len() - 1;
        for (k, w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                mode = k;
                break;
            }
        }
        loop {
            let dir = rng::normal_vec(rng, spec.d);
            if let Ok(c) = Condition::new(mode, dir) {
                return c;
            }
        }
    }

    /// Deterministic condition for evaluation sample `index`.
    pub fn for_seed(spec: &WorldSpec, seed: u64) -> Self {
        Self::random(spec, &mut rng::stream(seed, 0, 0, Role::Condition))
    }

    pub fn vector(&self, modes: usize) -> Vec<f64> {
        let mut v = vec![0.0; modes];
        v[self.mode] = 1.0;
        v.extend_from_slice(&self.direction);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSequence {
    pub chunks: Vec<Frames>,
    pub condition: Condition,
    pub provenance: String,
}

impl LatentSequence {
    pub fn to_frames(&self) -> Frames {
        Frames::stack(&self.chunks).expect("chunks share a width")
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.chunks.iter().flat_map(|c| c.data.iter().copied()).collect()
    }

    pub fn from_frames(frames: &Frames, c: usize, condition: Condition, provenance: impl Into<String>) -> Self {
        Self {
            chunks: (0..frames.rows / c).map(|i| frames.slice_rows(i * c, c)).collect(),
            condition,
            provenance: provenance.into(),
        }
    }
}

/// One mixture component in its eigenbasis.
#[derive(Debug, Clone)]
struct Component {
    mean: DVector<f64>,
    evals: DVector<f64>,
    evecs: DMatrix<f64>,
}

impl Component {
    /// Returns `(log N(x), score)` for the component noised at `σ`.
    fn eval(&self, x: &DVector<f64>, sigma: f64) -> (f64, DVector<f64>) {
        let a = 1.0 - sigma;
        let r = x - &self.mean * a;
        let z = self.evecs.tr_mul(&r);
        let mut logdet = 0.0;
        let mut quad = 0.0;
        let mut w = DVector::zeros(z.len());
        for i in 0..z.len() {
            let v = a * a * self.evals[i] + sigma * sigma;
            logdet += v.ln();
            quad += z[i] * z[i] / v;
            w[i] = z[i] / v;
        }
        let n = z.len() as f64;
        let logp = -0.5 * (quad + logdet + n * LN_2PI);
        (logp, -(&self.evecs * w))
    }
}

/// A [`WorldSpec`] with per-mode Gaussian structure precomputed.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    comps: Vec<Component>,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let comps = spec.modes.iter().map(|m| build_component(&spec, m)).collect();
        Ok(Self { spec, comps })
    }

    pub fn from_params(p: &WorldParams) -> Result<Self> {
        Self::new(WorldSpec::generate(p)?)
    }

    pub fn mode_mean(&self, k: usize) -> Vec<f64> {
        self.comps[k].mean.as_slice().to_vec()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.comps.iter().map(|c| c.evals.min()).fold(f64::INFINITY, f64::min)
    }

    pub fn sample_video(&self, cond: &Condition, rng: &mut impl Rng) -> Result<LatentSequence> {
        let spec = &self.spec;
        let m = spec
            .modes
            .get(cond.mode)
            .ok_or_else(|| Error::Invalid(format!("mode {} not in world with {} modes", cond.mode, spec.modes.len())))?;
        let d = spec.d;
        let f = spec.frames();
        let mut x = Frames::zeros(f, d);
        for (v, e) in x.row_mut(0).iter_mut().zip(rng::normal_vec(rng, d)) {
            *v = spec.p0 * e;
        }
        for t in 1..f {
            let noise = rng::normal_vec(rng, d);
            let prev = x.row(t - 1).to_vec();
            let row = x.row_mut(t);
            for i in 0..d {
                let ax: f64 = (0..d).map(|j| m.a[i * d + j] * prev[j]).sum();
                row[i] = ax + m.b[i] + m.q * noise[i];
            }
        }
        Ok(LatentSequence::from_frames(&x, spec.c, cond.clone(), "world"))
    }

    fn check_input(&self, x: &[f64], sigma: f64) -> Result<()> {
        if x.len() != self.spec.numel() {
            return Err(Error::shape("noised_score", &[self.spec.numel()], &[x.len()]));
        }
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::Invalid(format!("sigma {sigma} outside [0, 1]")));
        }
        if sigma == 0.0 && self.min_eigenvalue() <= 0.0 {
            return Err(Error::Invalid("σ = 0 with a singular covariance".into()));
        }
        Ok(())
    }

    /// Exact `∇ log p_σ(x)`; with `mode` set, only that component is used.
    pub fn noised_score(&self, x: &[f64], sigma: f64, mode: Option<usize>) -> Result<Vec<f64>> {
        self.check_input(x, sigma)?;
        let xv = DVector::from_column_slice(x);
        if let Some(k) = mode {
            let c = self
                .comps
                .get(k)
                .ok_or_else(|| Error::Invalid(format!("mode {k} out of range")))?;
            return Ok(c.eval(&xv, sigma).1.as_slice().to_vec());
        }
        let evals: Vec<(f64, DVector<f64>)> = self.comps.iter().map(|c| c.eval(&xv, sigma)).collect();
        let logs: Vec<f64> = evals
            .iter()
            .zip(&self.spec.weights)
            .map(|((l, _), w)| l + w.ln())
            .collect();
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
        let mut out = DVector::zeros(x.len());
        for ((_, s), l) in evals.iter().zip(&logs) {
            out += s * ((l - mx).exp() / z);
        }
        Ok(out.as_slice().to_vec())
    }

    /// Mixture log-density of a noised flattened sequence.
    pub fn noised_log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.check_input(x, sigma)?;
        let xv = DVector::from_column_slice(x);
        let logs: Vec<f64> = self
            .comps
            .iter()
            .zip(&self.spec.weights)
            .map(|(c, w)| c.eval(&xv, sigma).0 + w.ln())
            .collect();
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln())
    }

    /// Eigenvalues of mode `k`'s covariance (ascending order not implied)
    /// and the coordinates of `x − mean` in that eigenbasis.
    pub fn whitened(&self, x: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self
            .comps
            .get(k)
            .ok_or_else(|| Error::Invalid(format!("mode {k} out of range")))?;
        if x.len() != c.mean.len() {
            return Err(Error::shape("whitened", &[c.mean.len()], &[x.len()]));
        }
        let r = DVector::from_column_slice(x) - &c.mean;
        let z = c.evecs.tr_mul(&r);
        Ok((c.evals.as_slice().to_vec(), z.as_slice().to_vec()))
    }

    pub fn oracle_loglik(&self, x: &LatentSequence) -> Result<f64> {
        self.noised_log_density(&x.flatten(), 0.0)
    }
}

/// Mean and covariance of the flattened linear-Gaussian sequence.
fn build_component(spec: &WorldSpec, m: &ModeSpec) -> Component {
    let (d, f) = (spec.d, spec.frames());
    let a = DMatrix::from_row_slice(d, d, &m.a);
    let b = DVector::from_column_slice(&m.b);
    let n = d * f;
    let mut mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    let mut mu = DVector::zeros(d);
    let mut c = DMatrix::identity(d, d) * (spec.p0 * spec.p0);
    let q2 = DMatrix::identity(d, d) * (m.q * m.q);
    for t in 0..f {
        if t > 0 {
            mu = &a * &mu + &b;
            c = &a * &c * a.transpose() + &q2;
        }
        mean.rows_mut(t * d, d).copy_from(&mu);
        // Cross-covariances Cov(x_{t+g}, x_t) = A^g C_t.
        let mut cross = c.clone();
        for g in 0..f - t {
            let s = t + g;
            cov.view_mut((s * d, t * d), (d, d)).copy_from(&cross);
            if g > 0 {
                cov.view_mut((t * d, s * d), (d, d)).copy_from(&cross.transpose());
            }
            cross = &a * cross;
        }
    }
    let eig = SymmetricEigen::new(cov);
    Component {
        mean,
        evals: eig.eigenvalues,
        evecs: eig.eigenvectors,
    }
}

/// Reward weights and the motion scale of the magnitude term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub alignment: f64,
    pub smoothness: f64,
    pub magnitude: f64,
    pub magnitude_scale: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alignment: 0.25,
            smoothness: 0.1,
            magnitude: 0.1,
            magnitude_scale: 0.5,
        }
    }
}

/// Per-term values of the reward, each in `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTerms {
    pub alignment: f64,
    pub smoothness: f64,
    pub magnitude: f64,
    pub total: f64,
}

/// Differentiable reward of a `frames × d` block.
///
/// alignment: cosine between the first-to-last displacement and the target
/// direction. smoothness: `−tanh(mean squared second difference)`.
/// magnitude: `tanh(mean neighbor distance / scale)`.
pub fn reward_var(tape: &mut Tape, video: Var, direction: &[f64], w: &RewardWeights) -> Result<(Var, [Var; 3])> {
    let shape = tape.shape(video).to_vec();
    let (f, d) = (shape[0], shape[1]);
    if direction.len() != d {
        return Err(Error::shape("reward", &[d], &[direction.len()]));
    }
    if f < 2 {
        return Err(Error::Invalid("reward needs at least two frames".into()));
    }
    let first = tape.slice_rows(video, 0, 1)?;
    let last = tape.slice_rows(video, f - 1, 1)?;
    let disp = tape.sub(last, first)?;
    let dir = tape.constant(direction.to_vec(), &[1, d])?;
    let dot = tape.mul(disp, dir)?;
    let dot = tape.sum(dot)?;
    let nrm = tape.sq_norm(disp)?;
    let nrm = tape.offset(nrm, 1e-8)?;
    let nrm = tape.sqrt(nrm)?;
    let align = tape.div(dot, nrm)?;

    let smooth = if f >= 3 {
        let a = tape.slice_rows(video, 2, f - 2)?;
        let b = tape.slice_rows(video, 1, f - 2)?;
        let c = tape.slice_rows(video, 0, f - 2)?;
        let b2 = tape.scale(b, 2.0)?;
        let s = tape.sub(a, b2)?;
        let s = tape.add(s, c)?;
        let s2 = tape.mul(s, s)?;
        let msd = tape.mean(s2)?;
        let t = tape.tanh(msd)?;
        tape.scale(t, -1.0)?
    } else {
        tape.scalar_const(0.0)
    };

    let hi = tape.slice_rows(video, 1, f - 1)?;
    let lo = tape.slice_rows(video, 0, f - 1)?;
    let diff = tape.sub(hi, lo)?;
    let sq = tape.mul(diff, diff)?;
    let ones = tape.constant(vec![1.0; d], &[d, 1])?;
    let per = tape.matmul(sq, ones)?;
    let per = tape.offset(per, 1e-12)?;
    let dist = tape.sqrt(per)?;
    let mdist = tape.mean(dist)?;
    let mag = tape.scale(mdist, 1.0 / w.magnitude_scale)?;
    let mag = tape.tanh(mag)?;

    let t1 = tape.scale(align, w.alignment)?;
    let t2 = tape.scale(smooth, w.smoothness)?;
    let t3 = tape.scale(mag, w.magnitude)?;
    let total = tape.add(t1, t2)?;
    let total = tape.add(total, t3)?;
    Ok((total, [align, smooth, mag]))
}

/// Reward of plain frames.
pub fn reward_frames(video: &Frames, direction: &[f64], w: &RewardWeights) -> Result<RewardTerms> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(video.data.clone(), &[video.rows, video.dim])?;
    let (total, [a, s, m]) = reward_var(&mut tape, v, direction, w)?;
    Ok(RewardTerms {
        alignment: tape.scalar(a),
        smoothness: tape.scalar(s),
        magnitude: tape.scalar(m),
        total: tape.scalar(total),
    })
}

pub fn reward(x: &LatentSequence, w: &RewardWeights) -> Result<f64> {
    Ok(reward_frames(&x.to_frames(), &x.condition.direction, w)?.total)
}

#[cfg(test)]
mod tests;
