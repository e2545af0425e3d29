//! Runs every (dataset, method, seed) arm of an experiment and assembles the
//! report bundle.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::report::{write_bundle, ArmRecord, Bundle, Curve, DatasetRecord, Manifest};
use super::RolloutEvaluator;
use crate::config::ExperimentConfig;
use crate::dataset::{encode_binary, TrajectoryDataset};
use crate::env::RewardMode;
use crate::error::{Error, Result};
use crate::train::{train, training_set, Method, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub index: usize,
    pub dataset: usize,
    pub dataset_name: String,
    pub method: Method,
    pub seed: u64,
    pub train: TrainConfig,
}

impl ArmSpec {
    pub fn id(&self) -> String {
        format!("{}__{}__seed{}", self.dataset_name, self.method, self.seed)
    }
}

/// Arms in dataset, method, seed order.
pub fn arm_list(cfg: &ExperimentConfig) -> Vec<ArmSpec> {
    let mut arms = Vec::new();
    for (di, d) in cfg.datasets.iter().enumerate() {
        for &method in &cfg.methods {
            for &seed in &cfg.seeds {
                arms.push(ArmSpec {
                    index: arms.len(),
                    dataset: di,
                    dataset_name: d.name.clone(),
                    method,
                    seed,
                    train: cfg.train_config(method, seed, d),
                });
            }
        }
    }
    arms
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub log: TrainLog,
    pub param_count: usize,
    pub steps: u64,
    pub train_trajectories: usize,
    pub train_transitions: usize,
    pub rtg_target: Option<f64>,
    pub epoch_seconds: Vec<f64>,
}

#[derive(Debug)]
pub struct ArmOutcome {
    pub spec: ArmSpec,
    /// `Error::Arm` on failure.
    pub result: Result<ArmRun>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub arms: Vec<ArmOutcome>,
    pub bundle: Bundle,
}

impl BenchOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &ArmOutcome> {
        self.arms.iter().filter(|a| a.result.is_err())
    }

    /// Writes the bundle plus per-arm evaluation logs and `timings.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        write_bundle(dir, &self.bundle)?;
        let arms_dir = dir.join("arms");
        std::fs::create_dir_all(&arms_dir).map_err(|e| Error::io(&arms_dir, e))?;
        let mut timings = String::from("arm,seconds,epochs,mean_epoch_seconds\n");
        for a in &self.arms {
            let (epochs, per_epoch) = match &a.result {
                Ok(run) => (run.epoch_seconds.len(), super::stats::mean(&run.epoch_seconds)),
                Err(_) => (0, f64::NAN),
            };
            let _ = writeln!(timings, "{},{},{},{}", a.spec.id(), a.seconds, epochs, per_epoch);
            let path = arms_dir.join(format!("{}.csv", a.spec.id()));
            let body = match &a.result {
                Ok(run) => run.log.evals_csv(),
                Err(e) => format!("error\n{}\n", e.to_string().replace('\n', " ")),
            };
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("timings.csv");
        std::fs::write(&path, timings).map_err(|e| Error::io(&path, e))
    }
}

fn metric(cfg: &ExperimentConfig, di: usize) -> &'static str {
    let d = &cfg.datasets[di];
    if d.random_ref.is_some() {
        "normalized"
    } else if d.env_mode() == RewardMode::Sparse {
        "success_rate"
    } else {
        "return"
    }
}

fn check_datasets(cfg: &ExperimentConfig, datasets: &[TrajectoryDataset]) -> Result<()> {
    if datasets.len() != cfg.datasets.len() {
        return Err(Error::InvalidArgument(format!(
            "config lists {} datasets, {} supplied",
            cfg.datasets.len(),
            datasets.len()
        )));
    }
    Ok(())
}

/// Human-readable plan: training set size, steps and parameter count per
/// arm. Nothing is trained.
pub fn dry_run(cfg: &ExperimentConfig, datasets: &[TrajectoryDataset]) -> Result<String> {
    check_datasets(cfg, datasets)?;
    let mut out = String::new();
    let _ = writeln!(out, "experiment {}: {} arms", cfg.name, arm_list(cfg).len());
    let _ = writeln!(out, "arm,train_trajectories,train_transitions,steps_per_epoch,total_steps,params");
    for arm in arm_list(cfg) {
        let ds = &datasets[arm.dataset];
        match training_set(ds, &arm.train) {
            Ok(set) => {
                let per_epoch = arm.train.steps_per_epoch(set.total_transitions());
                let params = arm.train.policy_config(&set).param_count();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    arm.id(),
                    set.len(),
                    set.total_transitions(),
                    per_epoch,
                    per_epoch * arm.train.epochs,
                    params
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{},error: {e}", arm.id());
            }
        }
    }
    Ok(out)
}

fn run_arm(cfg: &ExperimentConfig, datasets: &[TrajectoryDataset], arm: &ArmSpec) -> Result<ArmRun> {
    let ds = &datasets[arm.dataset];
    let mut evaluator = RolloutEvaluator {
        spec: cfg.datasets[arm.dataset].eval_spec(cfg.eval.n_rollouts),
        seed: arm.seed,
    };
    let out = train(ds, &arm.train, Some(&mut evaluator))?;
    Ok(ArmRun {
        param_count: out.policy.param_count(),
        steps: out.steps,
        train_trajectories: out.train_trajectories,
        train_transitions: out.train_transitions,
        rtg_target: out.rtg_target,
        epoch_seconds: out.epoch_seconds,
        log: out.log,
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| (*s).to_owned())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_owned())
}

/// Trains and evaluates every arm on a pool of `parallel` threads. A failing
/// arm is recorded and the rest continue. Results do not depend on
/// `parallel`.
pub fn run_benchmark(cfg: &ExperimentConfig, datasets: &[TrajectoryDataset], parallel: usize) -> Result<BenchOutcome> {
    cfg.validate()?;
    check_datasets(cfg, datasets)?;
    if parallel == 0 {
        return Err(Error::InvalidArgument("parallel must be at least 1".into()));
    }
    let arms = arm_list(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<ArmOutcome> = pool.install(|| {
        arms.into_par_iter()
            .map(|spec| {
                let started = Instant::now();
                let result = match catch_unwind(AssertUnwindSafe(|| run_arm(cfg, datasets, &spec))) {
                    Ok(Ok(run)) => Ok(run),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(p) => Err(panic_message(p)),
                }
                .map_err(|message| Error::Arm {
                    arm: spec.id(),
                    message,
                });
                ArmOutcome {
                    spec,
                    result,
                    seconds: started.elapsed().as_secs_f64(),
                }
            })
            .collect()
    });
    let bundle = assemble(cfg, datasets, &outcomes);
    Ok(BenchOutcome { arms: outcomes, bundle })
}

fn assemble(cfg: &ExperimentConfig, datasets: &[TrajectoryDataset], arms: &[ArmOutcome]) -> Bundle {
    let dataset_records = cfg
        .datasets
        .iter()
        .zip(datasets)
        .enumerate()
        .map(|(i, (d, ds))| DatasetRecord {
            name: d.name.clone(),
            env: d.env.name().to_owned(),
            regime: ds.regime(),
            sha256: Sha256::digest(encode_binary(ds)).iter().map(|b| format!("{b:02x}")).collect(),
            trajectories: ds.len(),
            transitions: ds.total_transitions(),
            successes: ds.success_count(),
            metric: metric(cfg, i).to_owned(),
        })
        .collect();
    let arm_records = arms
        .iter()
        .map(|a| {
            let run = a.result.as_ref().ok();
            let evals = run.map(|r| r.log.evals.as_slice()).unwrap_or_default();
            ArmRecord {
                id: a.spec.id(),
                dataset: a.spec.dataset_name.clone(),
                method: a.spec.method,
                seed: a.spec.seed,
                ok: run.is_some(),
                error: a.result.as_ref().err().map(|e| e.to_string()),
                train: a.spec.train.clone(),
                param_count: run.map(|r| r.param_count),
                steps: run.map(|r| r.steps),
                train_trajectories: run.map(|r| r.train_trajectories),
                train_transitions: run.map(|r| r.train_transitions),
                rtg_target: run.and_then(|r| r.rtg_target),
                final_score: evals.last().and_then(|e| e.score),
                best_score: evals.last().and_then(|e| e.best_score),
            }
        })
        .collect();
    let mut curves = Vec::new();
    for d in &cfg.datasets {
        for &method in &cfg.methods {
            let seeds: Vec<Vec<(usize, f64)>> = arms
                .iter()
                .filter(|a| a.spec.dataset_name == d.name && a.spec.method == method)
                .filter_map(|a| a.result.as_ref().ok())
                .map(|r| r.log.evals.iter().filter_map(|e| e.score.map(|s| (e.epoch, s))).collect())
                .collect();
            curves.push(Curve::aggregate(&d.name, method, &seeds));
        }
    }
    Bundle {
        manifest: Manifest {
            name: cfg.name.clone(),
            config: cfg.clone(),
            datasets: dataset_records,
            arms: arm_records,
        },
        curves,
    }
}
