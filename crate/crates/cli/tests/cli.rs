use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use offrl::dataset::save_dataset;
use offrl::env::lift_like_fixture;

fn offrl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offrl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("OFFRL_OUTPUT_DIR")
        .env("NO_COLOR", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = offrl(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const TINY_TRAIN: &str = "epochs = 2\nmlp = { depth = 1, hidden = 8 }\n";

#[test]
fn inspect_lift_like_fixture() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&lift_like_fixture(0).unwrap(), dir.path().join("lift.traj")).unwrap();
    let out = ok(&["dataset", "inspect", "lift.traj"], dir.path());
    assert!(out.contains("successful: 244 / 1500"), "{out}");
    assert!(out.contains("trajectories: 1500"), "{out}");
    assert!(out.contains("median"), "{out}");
}

#[test]
fn top_fraction_of_ten_keeps_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["dataset", "gen", "--env", "chainrun", "--reward", "dense", "--mixture", "random:10", "--seed", "3", "d.traj"], p);
    ok(&["dataset", "sparsify", "d.traj", "s.traj"], p);
    let out = ok(&["dataset", "filter", "--mode", "top-fraction", "--fraction", "0.10", "s.traj", "f.traj"], p);
    assert!(out.contains("kept 1 / 10"), "{out}");
    assert!(ok(&["dataset", "inspect", "f.traj"], p).contains("trajectories: 1\n"));
}

#[test]
fn sparsify_preserves_returns_and_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["dataset", "gen", "--env", "chainrun", "--reward", "dense", "--mixture", "medium:6,random:6", "--seed", "1", "d.traj"], p);
    let before_bytes = fs::read(p.join("d.traj")).unwrap();
    ok(&["dataset", "sparsify", "d.traj", "s.traj"], p);
    assert_eq!(fs::read(p.join("d.traj")).unwrap(), before_bytes);
    let returns = |f: &str| -> Vec<String> {
        ok(&["dataset", "inspect", "--per-trajectory", f], p)
            .lines()
            .skip_while(|l| !l.starts_with("index,"))
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().to_owned())
            .collect()
    };
    let (a, b) = (returns("d.traj"), returns("s.traj"));
    assert_eq!(a.len(), 12);
    assert_eq!(a, b);
    assert!(ok(&["dataset", "inspect", "s.traj"], p).contains("regime: sparsified"));
}

#[test]
fn sparsify_twice_is_a_regime_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["dataset", "gen", "--env", "chainrun", "--reward", "dense", "--mixture", "random:2", "--seed", "1", "d.traj"], p);
    ok(&["dataset", "sparsify", "d.traj", "s.traj"], p);
    let out = offrl(&["dataset", "sparsify", "s.traj", "t.traj"], p);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("regime"));
}

#[test]
fn train_is_deterministic_and_eval_counts_rollouts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("train.toml"), TINY_TRAIN).unwrap();
    ok(&["dataset", "gen", "--env", "pointreach", "--reward", "sparse", "--mixture", "expert:4,random:4", "--seed", "0", "d.traj"], p);
    for out in ["a", "b"] {
        ok(
            &["train", "fbc", "--data", "d.traj", "--seed", "0", "--config", "train.toml", "--rollouts", "3", "--out", out],
            p,
        );
    }
    for f in ["final.ckpt", "best.ckpt", "steps.csv", "evals.csv", "log.jsonl", "config.json"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
    ok(&["eval", "--checkpoint", "a/final.ckpt", "--rollouts", "50", "--out", "report.json"], p);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rollouts"].as_array().unwrap().len(), 50);
    assert_eq!(report["result"]["rollouts"], 50);
}

#[test]
fn train_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = offrl(&["train", "bc", "--data", "d.traj"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn empty_filter_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("train.toml"), TINY_TRAIN).unwrap();
    ok(&["dataset", "gen", "--env", "pointreach", "--reward", "sparse", "--mixture", "random:3", "--seed", "0", "d.traj"], p);
    assert!(ok(&["dataset", "inspect", "d.traj"], p).contains("successful: 0 / 3"));
    let out = offrl(&["train", "fbc", "--data", "d.traj", "--seed", "0", "--config", "train.toml"], p);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("filter retained no trajectories"), "{err}");
}

#[test]
fn config_errors_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("bad.toml"),
        "name = \"\"\nseeds = []\n[[datasets]]\nname = \"d\"\nenv = \"chainrun\"\nreward = \"sparse\"\nmixture = [{ quality = \"random\", count = 1 }]\n[train]\nepochs = 0\n",
    )
    .unwrap();
    let out = offrl(&["bench", "--config", "bad.toml"], p);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["name must not be empty", "seeds must list", "no sparse reward mode", "epochs must be at least 1"] {
        assert!(err.contains(needle), "missing {needle:?} in {err}");
    }
}

#[test]
fn usage_and_data_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&offrl(&["dataset", "frobnicate"], p)), 1);
    assert_eq!(code(&offrl(&["dataset", "inspect", "missing.traj"], p)), 2);
    fs::write(p.join("junk.traj"), "not a dataset").unwrap();
    assert_eq!(code(&offrl(&["dataset", "inspect", "junk.traj"], p)), 2);
    assert_eq!(code(&offrl(&["--help"], p)), 0);
}

const TINY_BENCH: &str = r#"
name = "tiny"
methods = ["bc", "fbc"]
seeds = [0, 1]

[[datasets]]
name = "pr"
env = "pointreach"
reward = "sparse"
mixture = [{ quality = "expert", count = 3 }, { quality = "random", count = 3 }]

[train]
epochs = 2
mlp = { depth = 1, hidden = 8 }

[eval]
n_rollouts = 3
eval_every_epochs = 1
"#;

#[test]
fn bench_dry_run_then_run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("tiny.toml"), TINY_BENCH).unwrap();
    let plan = ok(&["bench", "--config", "tiny.toml", "--dry-run"], p);
    assert!(plan.contains("4 arms"), "{plan}");
    assert!(plan.contains("pr__fbc__seed1"), "{plan}");
    assert!(!p.join("runs").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_offrl"))
        .args(["bench", "--config", "tiny.toml"])
        .current_dir(p)
        .env("OFFRL_OUTPUT_DIR", p.join("bundle"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let b = p.join("bundle");
    let summary = fs::read_to_string(b.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let before = fs::read(b.join("summary.txt")).unwrap();
    let plot = fs::read(b.join("plots/pr.svg")).unwrap();
    fs::remove_file(b.join("summary.txt")).unwrap();
    ok(&["report", "bundle"], p);
    assert_eq!(fs::read(b.join("summary.txt")).unwrap(), before);
    assert_eq!(fs::read(b.join("plots/pr.svg")).unwrap(), plot);
}

#[test]
fn report_on_missing_bundle_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&offrl(&["report", "nope"], dir.path())), 2);
}
