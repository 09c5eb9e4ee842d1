use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
[pretrain]
steps = 20
batch = 2

[distill]
steps = 3
loglik_floor = -1e12

[train]
steps = 2
batch = 2
fake_warmup = 2

[eval]
conditions = 2
per_condition = 2
"#;

fn arfn(dir: &Path, args: &[&str]) -> (i32, String) {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    let out = Command::new(env!("CARGO_BIN_EXE_arfn"))
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .args(args)
        .env("ARFN_THREADS", "2")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (code, text) = arfn(dir, args);
    assert_eq!(code, 0, "{args:?}: {text}");
    text
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(arfn(dir.path(), &["frobnicate"]).0, 2);
    assert_eq!(arfn(dir.path(), &["sample", "--no-such-flag"]).0, 2);
    assert_eq!(arfn(dir.path(), &["train-refiner", "--objective", "both"]).0, 2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nunknown_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_arfn"))
        .args(["--config", bad.to_str().unwrap(), "selfcheck"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Sampling before any base exists is a configuration problem.
    assert_eq!(arfn(dir.path(), &["sample"]).0, 2);
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["selfcheck"]);
    assert!(text.contains("kv-equivalence") && !text.contains("FAIL"), "{text}");
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["pretrain-base"]);
    assert!(d.join("base.ckpt").exists() && d.join("pretrain.csv").exists());
    assert!(d.join("plots/training_flow.dat").exists());

    // Same seed, same bytes.
    ok(d, &["sample", "--sampler", "ode", "--seed", "7"]);
    let first = std::fs::read(d.join("samples.json")).unwrap();
    ok(d, &["sample", "--sampler", "ode", "--seed", "7"]);
    assert_eq!(first, std::fs::read(d.join("samples.json")).unwrap());

    // Re-evaluating saved samples appends identical rows.
    let s = d.join("samples.json");
    ok(d, &["eval", "--samples", s.to_str().unwrap(), "--label", "ode"]);
    ok(d, &["eval", "--samples", s.to_str().unwrap(), "--label", "ode"]);
    let rows: Vec<String> = std::fs::read_to_string(d.join("eval.csv")).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1], rows[2]);

    ok(d, &["train-refiner", "--objective", "reward", "--baseline", "init-refiner", "--format", "jsonl"]);
    assert!(d.join("refiner.ckpt").exists() && d.join("train_init-refiner-reward.jsonl").exists());
    ok(d, &["eval", "--compare-samplers"]);
    assert!(d.join("plots/ode_vs_stochastic.dat").exists());
    ok(d, &["search", "--method", "sop"]);
    let (_, series) = arfn::harness::plots::read_series(&d.join("plots/overhead.dat")).unwrap();
    assert_eq!(series.len(), 4);
    assert_eq!(series[3][0], "sop5");

    let text = ok(d, &["ablate", "--refined-steps", "750"]);
    let table = std::fs::read_to_string(d.join("ablation.csv")).unwrap();
    assert!(table.contains("steps:750,") && table.contains("full,"), "{text}\n{table}");
    assert_eq!(arfn(d, &["ablate", "--refined-steps", "1000"]).0, 2);
}
