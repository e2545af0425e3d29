use std::path::Path;

use offrl::config::ExperimentConfig;
use offrl::dataset::{load_dataset, save_dataset, save_dataset_text};
use offrl::env::{generate_dataset, EnvKind, GeneratorSpec, RewardMode};
use offrl::eval::{load_bundle, rollout, run_benchmark};
use offrl::policy::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use offrl::train::{train, DtShape, Method, TrainConfig};

#[test]
fn generated_data_survives_both_encodings() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec::parse("expert:3,medium@0.5:3,random:3").unwrap();
    let ds = generate_dataset(EnvKind::PointReach, RewardMode::Sparse, &spec, 11).unwrap();
    save_dataset(&ds, dir.path().join("a.traj")).unwrap();
    save_dataset_text(&ds, dir.path().join("b.traj")).unwrap();
    assert_eq!(load_dataset(dir.path().join("a.traj")).unwrap(), ds);
    assert_eq!(load_dataset(dir.path().join("b.traj")).unwrap(), ds);
}

#[test]
fn reloaded_checkpoint_acts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec::parse("expert:4,random:4").unwrap();
    let ds = generate_dataset(EnvKind::ChainRun, RewardMode::Dense, &spec, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: Some(32),
        dt: DtShape { layers: 1, embed_dim: 8, ..DtShape::default() },
        ..TrainConfig::new(Method::Dt, 4)
    };
    let out = train(&ds, &cfg, None).unwrap();
    let ckpt = Checkpoint {
        policy: out.policy.clone(),
        meta: CheckpointMeta {
            method: "dt".into(),
            env_name: "chainrun".into(),
            seed: 4,
            step: out.steps,
            epoch: 1,
            rtg_target: out.rtg_target,
            regime: Some(ds.regime()),
        },
    };
    let path = dir.path().join("p.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);

    let mut env = EnvKind::ChainRun.make(RewardMode::Dense).unwrap();
    let a = rollout(&out.policy, env.as_mut(), 9, out.rtg_target).unwrap();
    let b = rollout(&back.policy, env.as_mut(), 9, back.meta.rtg_target).unwrap();
    assert_eq!(a, b);
}

#[test]
fn failing_arm_does_not_stop_the_others() {
    let cfg = ExperimentConfig::from_toml(
        r#"
name = "partial"
methods = ["bc", "fbc"]
seeds = [0]

[[datasets]]
name = "nohits"
env = "pointreach"
reward = "sparse"
mixture = [{ quality = "random", count = 3 }]

[train]
epochs = 1
mlp = { depth = 1, hidden = 8 }

[eval]
n_rollouts = 2
eval_every_epochs = 1
"#,
    )
    .unwrap();
    let data: Vec<_> = cfg.datasets.iter().map(|d| d.materialize(Path::new("."))).collect::<Result<_, _>>().unwrap();
    assert_eq!(data[0].success_count(), Some(0));

    let out = run_benchmark(&cfg, &data, 1).unwrap();
    let failed: Vec<_> = out.failures().map(|a| a.spec.id()).collect();
    assert_eq!(failed, ["nohits__fbc__seed0"]);
    let err = out.failures().next().unwrap().result.as_ref().unwrap_err().to_string();
    assert!(err.contains("no trajectories"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    out.write_to(dir.path()).unwrap();
    let bundle = load_bundle(dir.path()).unwrap();
    let arms = &bundle.manifest.arms;
    assert_eq!(arms.len(), 2);
    assert!(arms[0].ok && !arms[1].ok);
    let cells = bundle.summary();
    let fbc = cells.iter().find(|c| c.method == Method::Fbc).unwrap();
    assert_eq!(fbc.seeds, 0);
    assert_eq!(fbc.failed, 1);
    assert!(cells.iter().find(|c| c.method == Method::Bc).unwrap().value.is_some());
}
