use super::*;
use crate::diffnum::finite_diff_check;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_world(a: f64, b: f64, q: f64, p0: f64, c: usize, n_chunks: usize) -> World {
    World::new(WorldSpec {
        d: 1,
        c,
        n_chunks,
        modes: vec![ModeSpec { a: vec![a], b: vec![b], q }],
        p0,
        weights: vec![1.0],
    })
    .unwrap()
}

fn one_mode(d: usize, f_chunks: usize, seed: u64) -> World {
    let p = WorldParams {
        d,
        c: 3,
        n_chunks: f_chunks,
        modes: 1,
        seed,
        ..WorldParams::default()
    };
    World::from_params(&p).unwrap()
}

/// Log-likelihood via the autoregressive factorization.
fn factorized_loglik(spec: &WorldSpec, k: usize, x: &[f64]) -> f64 {
    let d = spec.d;
    let m = &spec.modes[k];
    let gauss = |r: &[f64], s: f64| -> f64 {
        r.iter().map(|v| -0.5 * (v / s).powi(2) - s.ln() - 0.5 * LN_2PI).sum()
    };
    let mut total = gauss(&x[..d], spec.p0);
    for t in 1..spec.frames() {
        let prev = &x[(t - 1) * d..t * d];
        let cur = &x[t * d..(t + 1) * d];
        let r: Vec<f64> = (0..d)
            .map(|i| cur[i] - m.b[i] - (0..d).map(|j| m.a[i * d + j] * prev[j]).sum::<f64>())
            .collect();
        total += gauss(&r, m.q);
    }
    total
}

#[test]
fn degenerate_dynamics_pin_frames_to_drift() {
    let w = World::new(WorldSpec {
        d: 2,
        c: 2,
        n_chunks: 3,
        modes: vec![ModeSpec { a: vec![0.0; 4], b: vec![1.5, -0.5], q: 1e-12 }],
        p0: 1.0,
        weights: vec![1.0],
    })
    .unwrap();
    let cond = Condition::new(0, vec![1.0, 0.0]).unwrap();
    let x = w.sample_video(&cond, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().to_frames();
    for t in 1..x.rows {
        assert!((x.row(t)[0] - 1.5).abs() < 1e-9 && (x.row(t)[1] + 0.5).abs() < 1e-9);
    }
}

#[test]
fn lag_one_autocorrelation_matches_stationary_value() {
    // Stationary start: p0² = q²/(1 − 0.81).
    let q = 0.5;
    let w = scalar_world(0.9, 0.0, q, q / (1.0f64 - 0.81).sqrt(), 2, 1);
    let cond = Condition::new(0, vec![1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for _ in 0..10_000 {
        let x = w.sample_video(&cond, &mut rng).unwrap().flatten();
        sxy += x[0] * x[1];
        sxx += x[0] * x[0];
    }
    let rho = sxy / sxx;
    assert!((rho - 0.9).abs() < 0.02, "lag-1 autocorrelation {rho}");
}

#[test]
fn sampling_is_seed_deterministic() {
    let w = World::from_params(&WorldParams::default()).unwrap();
    let cond = Condition::for_seed(&w.spec, 3);
    let a = w.sample_video(&cond, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = w.sample_video(&cond, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let c = w.sample_video(&cond, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.flatten(), c.flatten());
    assert!(w.sample_video(&Condition::new(9, vec![1.0; 8]).unwrap(), &mut ChaCha8Rng::seed_from_u64(4)).is_err());
}

#[test]
fn default_world_is_stationary_with_unit_conditions() {
    let w = World::from_params(&WorldParams::default()).unwrap();
    assert_eq!(w.spec.numel(), 168);
    assert_eq!(w.spec.cond_dim(), 11);
    let c = Condition::for_seed(&w.spec, 11);
    let v = c.vector(3);
    assert_eq!(v[..3].iter().sum::<f64>(), 1.0);
    let n: f64 = v[3..].iter().map(|x| x * x).sum();
    assert!((n - 1.0).abs() < 1e-12);
}

#[test]
fn standard_normal_score_closed_form() {
    let w = scalar_world(0.0, 0.0, 1.0, 1.0, 2, 2);
    let x = [0.3, -1.2, 2.0, 0.5];
    for sigma in [0.1, 0.5, 0.9] {
        let s = w.noised_score(&x, sigma, None).unwrap();
        let v = (1.0 - sigma) * (1.0 - sigma) + sigma * sigma;
        for i in 0..4 {
            assert!((s[i] + x[i] / v).abs() < 1e-12);
        }
    }
}

#[test]
fn pure_noise_score_is_minus_x() {
    let w = World::from_params(&WorldParams::default()).unwrap();
    let x: Vec<f64> = (0..168).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
    let s = w.noised_score(&x, 1.0, None).unwrap();
    for i in 0..168 {
        assert!((s[i] + x[i]).abs() < 1e-10);
    }
}

#[test]
fn score_matches_numeric_integration_in_two_dimensions() {
    // Two-mode mixture over two scalar frames; density by grid quadrature.
    let spec = WorldSpec {
        d: 1,
        c: 2,
        n_chunks: 1,
        modes: vec![
            ModeSpec { a: vec![0.6], b: vec![1.0], q: 0.5 },
            ModeSpec { a: vec![-0.4], b: vec![-1.5], q: 0.7 },
        ],
        p0: 0.8,
        weights: vec![0.4, 0.6],
    };
    let w = World::new(spec.clone()).unwrap();
    let clean = |y0: f64, y1: f64| -> f64 {
        spec.modes
            .iter()
            .zip(&spec.weights)
            .map(|(m, wt)| {
                let p1 = (-0.5 * (y0 / spec.p0).powi(2)).exp() / (spec.p0 * (2.0 * std::f64::consts::PI).sqrt());
                let r = y1 - m.a[0] * y0 - m.b[0];
                let p2 = (-0.5 * (r / m.q).powi(2)).exp() / (m.q * (2.0 * std::f64::consts::PI).sqrt());
                wt * p1 * p2
            })
            .sum()
    };
    let h = 0.01;
    let grid: Vec<f64> = (0..1400).map(|i| -7.0 + h * i as f64).collect();
    for sigma in [0.3, 0.7] {
        let a = 1.0 - sigma;
        for x in [[0.2, 0.9], [-0.5, -1.0], [1.0, 0.1]] {
            let (mut p, mut g0, mut g1) = (0.0, 0.0, 0.0);
            for &y0 in &grid {
                for &y1 in &grid {
                    let r0 = x[0] - a * y0;
                    let r1 = x[1] - a * y1;
                    let k = clean(y0, y1) * (-(r0 * r0 + r1 * r1) / (2.0 * sigma * sigma)).exp();
                    p += k;
                    g0 -= k * r0 / (sigma * sigma);
                    g1 -= k * r1 / (sigma * sigma);
                }
            }
            assert!(p * h * h / (2.0 * std::f64::consts::PI * sigma * sigma) > 1e-6);
            let s = w.noised_score(&x, sigma, None).unwrap();
            let num = [g0 / p, g1 / p];
            let err = ((s[0] - num[0]).powi(2) + (s[1] - num[1]).powi(2)).sqrt();
            let scale = (num[0].powi(2) + num[1].powi(2)).sqrt();
            assert!(err <= 0.02 * scale, "σ={sigma} x={x:?}: {s:?} vs {num:?}");
        }
    }
}

#[test]
fn small_sigma_converges_to_clean_score() {
    let w = World::from_params(&WorldParams::default()).unwrap();
    let cond = Condition::for_seed(&w.spec, 2);
    let x = w.sample_video(&cond, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().flatten();
    let a = w.noised_score(&x, 1e-3, None).unwrap();
    let b = w.noised_score(&x, 1e-4, None).unwrap();
    let diff: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff < 0.01 * nb, "{diff} vs {nb}");
}

#[test]
fn loglik_peak_and_factorization() {
    let w = one_mode(3, 2, 5);
    let m = w.mode_mean(0);
    let spec = &w.spec;
    let d = spec.d as f64;
    let f = spec.frames() as f64;
    let q = spec.modes[0].q;
    let peak = -0.5 * d * (2.0 * std::f64::consts::PI * spec.p0 * spec.p0).ln()
        - 0.5 * (f - 1.0) * d * (2.0 * std::f64::consts::PI * q * q).ln();
    let cond = Condition::new(0, vec![1.0, 0.0, 0.0]).unwrap();
    let at_mean = LatentSequence::from_frames(&Frames::new(spec.frames(), spec.d, m).unwrap(), 3, cond.clone(), "t");
    assert!((w.oracle_loglik(&at_mean).unwrap() - peak).abs() < 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let x = w.sample_video(&cond, &mut rng).unwrap();
        let want = factorized_loglik(spec, 0, &x.flatten());
        assert!((w.oracle_loglik(&x).unwrap() - want).abs() < 1e-8);
    }
}

#[test]
fn mean_loglik_matches_negative_entropy() {
    let w = one_mode(2, 2, 8);
    let spec = &w.spec;
    let (d, f, q) = (spec.d as f64, spec.frames() as f64, spec.modes[0].q);
    let e = std::f64::consts::E;
    let pi = std::f64::consts::PI;
    let entropy = 0.5 * d * (2.0 * pi * e * spec.p0 * spec.p0).ln() + 0.5 * (f - 1.0) * d * (2.0 * pi * e * q * q).ln();
    let cond = Condition::new(0, vec![1.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ll: Vec<f64> = (0..1000)
        .map(|_| w.oracle_loglik(&w.sample_video(&cond, &mut rng).unwrap()).unwrap())
        .collect();
    let m = crate::stats::mean(&ll);
    let se = (crate::stats::variance(&ll) / 1000.0).sqrt();
    assert!((m + entropy).abs() < 4.0 * se, "{m} vs {}", -entropy);
}

#[test]
fn far_shift_lowers_loglik() {
    let w = World::from_params(&WorldParams::default()).unwrap();
    let cond = Condition::for_seed(&w.spec, 1);
    let x = w.sample_video(&cond, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut far = x.clone();
    far.chunks.iter_mut().for_each(|c| c.data.iter_mut().for_each(|v| *v += 100.0));
    assert!(w.oracle_loglik(&far).unwrap() < w.oracle_loglik(&x).unwrap());
}

#[test]
fn mode_labels_do_not_matter() {
    let w = World::from_params(&WorldParams::default()).unwrap();
    let mut spec = w.spec.clone();
    spec.modes.reverse();
    let w2 = World::new(spec).unwrap();
    let cond = Condition::for_seed(&w.spec, 6);
    let x = w.sample_video(&cond, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (a, b) = (w.oracle_loglik(&x).unwrap(), w2.oracle_loglik(&x).unwrap());
    assert!((a - b).abs() < 1e-9 * a.abs());
    let rw = RewardWeights::default();
    assert_eq!(reward(&x, &rw).unwrap(), reward(&x, &rw).unwrap());
}

#[test]
fn static_sequence_reward_terms() {
    let row = [0.5, -0.2, 0.1];
    let mut f = Frames::zeros(6, 3);
    for t in 0..6 {
        f.row_mut(t).copy_from_slice(&row);
    }
    let r = reward_frames(&f, &[1.0, 0.0, 0.0], &RewardWeights::default()).unwrap();
    assert_eq!(r.smoothness, 0.0);
    assert!(r.magnitude.abs() < 1e-5);
    let rw = RewardWeights::default();
    assert_eq!((rw.alignment, rw.smoothness, rw.magnitude), (0.25, 0.1, 0.1));
}

#[test]
fn reward_terms_are_bounded_and_gradient_checks() {
    let w = World::from_params(&WorldParams::default()).unwrap();
    let cond = Condition::for_seed(&w.spec, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = w.sample_video(&cond, &mut rng).unwrap().to_frames();
    let r = reward_frames(&x, &cond.direction, &RewardWeights::default()).unwrap();
    for t in [r.alignment, r.smoothness, r.magnitude] {
        assert!((-1.0..=1.0).contains(&t));
    }
    let dir = cond.direction.clone();
    let err = finite_diff_check(
        |t, v| {
            let (tot, _) = reward_var(t, v, &dir, &RewardWeights::default()).map_err(|e| match e {
                Error::Diff(d) => d,
                other => crate::diffnum::DiffError::Invalid(other.to_string()),
            })?;
            Ok(tot)
        },
        &x.data,
        &[x.rows, x.dim],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "reward fd error {err}");
}

proptest! {
    #[test]
    fn single_mode_score_is_affine(
        x in proptest::collection::vec(-3.0f64..3.0, 12),
        y in proptest::collection::vec(-3.0f64..3.0, 12),
        sigma in 0.05f64..1.0,
    ) {
        let w = one_mode(2, 2, 1);
        let s0 = w.noised_score(&[0.0; 12], sigma, Some(0)).unwrap();
        let sx = w.noised_score(&x, sigma, Some(0)).unwrap();
        let sy = w.noised_score(&y, sigma, Some(0)).unwrap();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let sxy = w.noised_score(&xy, sigma, Some(0)).unwrap();
        for i in 0..12 {
            let want = sx[i] + sy[i] - s0[i];
            prop_assert!((sxy[i] - want).abs() < 1e-8 * (1.0 + want.abs()));
        }
    }
}
