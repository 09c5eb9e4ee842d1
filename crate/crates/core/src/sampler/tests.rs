use super::*;
use crate::denoiser::TokenRole;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    cfg: DenoiserConfig,
    base: ParamSet,
    refiner: RefinerParams,
    sched: NoiseSchedule,
    cond: Condition,
}

fn fixture() -> Fixture {
    let cfg = DenoiserConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let base = cfg.init_params(&mut rng).unwrap();
    let refiner = RefinerParams::new(&cfg, 4, 4.0, &mut rng).unwrap();
    let cond = Condition::new(1, (0..8).map(|i| i as f64 - 3.0).collect()).unwrap();
    Fixture {
        cfg,
        base,
        refiner,
        sched: NoiseSchedule::default_toy(),
        cond,
    }
}

fn gen<'a>(f: &'a Fixture, refiner: Option<RefinerRef<'a>>) -> Generator<'a> {
    Generator {
        cfg: &f.cfg,
        base: &f.base,
        lora: None,
        refiner,
        schedule: &f.sched,
        n_chunks: 7,
    }
}

#[test]
fn zero_init_refiners_reproduce_base_bitwise() {
    let f = fixture();
    let flags = RefineFlags::default();
    let base = rollout_stochastic(&gen(&f, None), &f.cond, 5).unwrap();
    for kind in [RefinerKind::Pathwise, RefinerKind::Initial] {
        let r = RefinerRef { params: &f.refiner, kind, flags: &flags };
        let refined = rollout_stochastic(&gen(&f, Some(r)), &f.cond, 5).unwrap();
        assert_eq!(refined.video.chunks, base.video.chunks, "{kind:?}");
    }
}

#[test]
fn evaluation_counts_follow_the_schedule() {
    let f = fixture();
    let flags = RefineFlags::default();
    let t = f.sched.len() as u64;
    let base = rollout_stochastic(&gen(&f, None), &f.cond, 1).unwrap();
    assert_eq!(base.counters.model_evals, 7 * t);
    assert_eq!(base.counters.refiner_evals, 0);
    let path = RefinerRef { params: &f.refiner, kind: RefinerKind::Pathwise, flags: &flags };
    let r = rollout_stochastic(&gen(&f, Some(path)), &f.cond, 1).unwrap();
    assert_eq!(r.counters.model_evals, 7 * t);
    assert_eq!(r.counters.refiner_evals, 7 * (t - 1));
    let init = RefinerRef { params: &f.refiner, kind: RefinerKind::Initial, flags: &flags };
    let r = rollout_stochastic(&gen(&f, Some(init)), &f.cond, 1).unwrap();
    assert_eq!(r.counters.refiner_evals, 7);
    let (_, ode) = rollout_ode(&gen(&f, None), &f.cond, 1).unwrap();
    assert_eq!(ode.model_evals, 7 * t);
    assert_eq!(ode.noise_draws, 7);
}

#[test]
fn single_step_schedule_never_renoises() {
    let mut f = fixture();
    f.sched = NoiseSchedule::from_paper_steps(&[1000], 5.0).unwrap();
    let flags = RefineFlags::default();
    let path = RefinerRef { params: &f.refiner, kind: RefinerKind::Pathwise, flags: &flags };
    let r = rollout_stochastic(&gen(&f, Some(path)), &f.cond, 2).unwrap();
    assert_eq!(r.counters.model_evals, 7);
    assert_eq!(r.counters.refiner_evals, 0);
    assert_eq!(r.counters.noise_draws, 7);
    assert!(r.record.chunks.iter().all(|c| c.path.is_empty()));
}

#[test]
fn replaying_the_record_is_bitwise() {
    let f = fixture();
    let g = gen(&f, None);
    let r = rollout_stochastic(&g, &f.cond, 8).unwrap();
    let (a, _) = deterministic_mapping(&g, &r.record, &f.cond).unwrap();
    let (b, _) = deterministic_mapping(&g, &r.record, &f.cond).unwrap();
    assert_eq!(a.chunks, r.video.chunks);
    assert_eq!(a, b);
}

#[test]
fn perturbing_a_path_noise_only_affects_later_chunks() {
    let f = fixture();
    let g = gen(&f, None);
    let r = rollout_stochastic(&g, &f.cond, 9).unwrap();
    let mut rec = r.record.clone();
    rec.chunks[3].path[1].data[0] += 0.5;
    let (v, _) = deterministic_mapping(&g, &rec, &f.cond).unwrap();
    for i in 0..7 {
        if i < 3 {
            assert_eq!(v.chunks[i], r.video.chunks[i]);
        } else {
            assert_ne!(v.chunks[i], r.video.chunks[i]);
        }
    }
}

#[test]
fn incomplete_record_is_rejected() {
    let f = fixture();
    let g = gen(&f, None);
    let mut rec = NoiseRecord::from_seed(1, 7, 4, 3, 8);
    rec.chunks.pop();
    assert!(deterministic_mapping(&g, &rec, &f.cond).is_err());
}

#[test]
fn history_cache_holds_only_final_chunks() {
    let f = fixture();
    let g = gen(&f, None);
    let rec = NoiseRecord::from_seed(3, 7, 4, 3, 8);
    let mut eng = Engine::new(g, &f.cond).unwrap();
    for (i, n) in rec.chunks.iter().enumerate() {
        let out = eng.run_chunk(n, (i * 3) as i64).unwrap();
        assert_eq!(eng.base_cache.count(TokenRole::History), i * 3);
        eng.commit(&out, (i * 3) as i64).unwrap();
    }
    assert_eq!(eng.base_cache.count(TokenRole::History), 21);
    assert_eq!(eng.base_cache.count(TokenRole::Reflect), 0);
}

#[test]
fn ode_and_stochastic_differ() {
    let f = fixture();
    let g = gen(&f, None);
    let s = rollout_stochastic(&g, &f.cond, 4).unwrap();
    let (o, _) = rollout_ode(&g, &f.cond, 4).unwrap();
    // Same initial draws, different paths.
    assert_eq!(s.record.chunks[0].init, NoiseRecord::from_seed(4, 7, 4, 3, 8).chunks[0].init);
    assert_ne!(s.video.chunks[0], o.chunks[0]);
}

/// For x0 ~ N(0, s²I) the exact flow maps x1 to s·x1.
#[test]
fn ode_with_oracle_velocity_reaches_analytic_endpoint() {
    let s2: f64 = 2.25;
    let steps: Vec<u32> = (1..=2000u32).rev().collect();
    let sched = NoiseSchedule::with_t_max(&steps, 1.0, 2000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x1 = crate::rng::normal_frames(&mut rng, 3, 4);
    let out = ode_integrate(&x1, &sched, |x, sig| {
        let a = 1.0 - sig;
        let v = a * a * s2 + sig * sig;
        // E[x0 − ε | x] for jointly Gaussian (x0, ε).
        let k = (a * s2 - sig) / v;
        Ok(Frames::new(x.rows, x.dim, x.data.iter().map(|u| k * u).collect()).unwrap())
    })
    .unwrap();
    for (o, x) in out.data.iter().zip(&x1.data) {
        assert!((o - s2.sqrt() * x).abs() < 2e-3 * (1.0 + x.abs()), "{o} vs {}", s2.sqrt() * x);
    }
}
