//! Small statistical helpers for paired comparisons.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// p-value for the alternative `mean(a − b) > 0`.
    pub p_greater: f64,
}

/// Paired one-sided t-test of `a` against `b`.
pub fn paired_t(a: &[f64], b: &[f64]) -> PairedTest {
    assert_eq!(a.len(), b.len(), "paired samples must align");
    assert!(a.len() >= 2, "need at least two pairs");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let m = mean(&d);
    let sd = variance(&d).sqrt();
    let (t, p) = if sd == 0.0 {
        // Identical differences: the sign decides.
        let t = if m > 0.0 {
            f64::INFINITY
        } else if m < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        let p = if m > 0.0 {
            0.0
        } else if m < 0.0 {
            1.0
        } else {
            0.5
        };
        (t, p)
    } else {
        let t = m / (sd / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, n as f64 - 1.0).expect("valid dof");
        (t, 1.0 - dist.cdf(t))
    };
    PairedTest {
        n,
        mean_diff: m,
        t,
        p_greater: p,
    }
}

/// Pearson χ² goodness-of-fit p-value against uniform cell probabilities.
pub fn chi2_uniform_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new(counts.len() as f64 - 1.0).expect("valid dof");
    1.0 - dist.cdf(stat)
}
