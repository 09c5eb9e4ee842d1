use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use arfn::denoiser::DenoiserConfig;
use arfn::objectives::Objective;
use arfn::refiner::RefineFlags;
use arfn::schedule::NoiseSchedule;
use arfn::synthdata::{Condition, World, WorldParams};
use arfn::trainer::{Arm, GradMode, OptimConfig, TrainConfig, Trainer};

/// Mean `½‖Δε‖²` of the trained refiner over fixed probes.
fn trained_shift(reg: f64) -> f64 {
    let world = World::from_params(&WorldParams::default()).unwrap();
    let cfg = DenoiserConfig::default();
    let base = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let tc = TrainConfig {
        objective: Objective::Reward,
        reg_weight: Some(reg),
        lr: Some(3e-3),
        optim: OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        },
        batch: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(world, cfg, base, NoiseSchedule::default_toy(), RefineFlags::default(), tc, Arm::Pathwise).unwrap();
    for _ in 0..40 {
        t.train_step().unwrap();
    }
    let mut acc = 0.0;
    let mut n = 0.0;
    for k in 0..4u64 {
        let cond = Condition::for_seed(&t.world.spec, 500 + k);
        for s in t.eligible_steps() {
            acc += t.sample_grad(&cond, s, 900 + k, GradMode::Truncated, 1.0).unwrap().reg;
            n += 1.0;
        }
    }
    acc / n
}

#[test]
fn larger_reg_weight_shrinks_the_refined_shift() {
    let shifts: Vec<f64> = [1e-3, 1e-2, 1e-1].iter().map(|r| trained_shift(*r)).collect();
    assert!(shifts[0] > shifts[1] && shifts[1] > shifts[2], "{shifts:?}");
    assert!(shifts[0] > 0.0);
}
