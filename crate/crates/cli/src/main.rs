use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use offrl::config::{ExperimentConfig, TrainOverrides};
use offrl::dataset::{load_dataset, save_dataset, save_dataset_text, RewardRegime, TrajectoryDataset};
use offrl::env::{generate_dataset, reference_scores, EnvKind, GeneratorSpec, RewardMode};
use offrl::eval::{self, evaluate_policy, load_bundle, render_reports, run_benchmark, EvalSpec, RolloutEvaluator};
use offrl::policy::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use offrl::rewards::{apply_filter, sparsify, FilterMode, FilterSpec, DEFAULT_TOP_FRACTION};
use offrl::train::{train, Evaluator, Method, TrainConfig};
use offrl::{Error, Result};

/// Offline RL toolkit: trajectory datasets, BC/FBC/DT/FDT training, and
/// benchmarks.
#[derive(Parser)]
#[command(name = "offrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create, inspect and transform `.traj` datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train one method on one dataset.
    Train(TrainArgs),
    /// Roll out a checkpoint and report its score.
    Eval(EvalArgs),
    /// Run every (dataset, method, seed) arm of an experiment config.
    Bench(BenchArgs),
    /// Re-render summaries and plots of an existing report bundle.
    Report {
        /// Bundle directory written by `bench`.
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Sparse,
    Dense,
}

impl From<RewardArg> for RewardMode {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::Sparse => RewardMode::Sparse,
            RewardArg::Dense => RewardMode::Dense,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    Success,
    TopFraction,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Roll out scripted policies in a toy environment.
    Gen {
        #[arg(long)]
        env: EnvKind,
        #[arg(long, value_enum)]
        reward: RewardArg,
        /// Items `quality[@noise]:count`, e.g. `expert:60,medium@0.5:120,random:120`.
        #[arg(long, default_value = "expert:60,medium@0.5:120,random:120")]
        mixture: String,
        #[arg(long)]
        seed: u64,
        /// Write the line-oriented text encoding instead of binary.
        #[arg(long)]
        text: bool,
        output: PathBuf,
    },
    /// Print size, success count and return quantiles.
    Inspect {
        input: PathBuf,
        /// Also list every trajectory's length, return and success flag.
        #[arg(long)]
        per_trajectory: bool,
    },
    /// Move each trajectory's return onto its final step.
    Sparsify {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        text: bool,
    },
    /// Keep successful trajectories, or the top fraction by final reward.
    Filter {
        /// Defaults to `success` for sparse data, `top-fraction` otherwise.
        #[arg(long, value_enum)]
        mode: Option<FilterArg>,
        #[arg(long, default_value_t = DEFAULT_TOP_FRACTION)]
        fraction: f64,
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        text: bool,
    },
    /// Mean returns of the scripted random and expert policies.
    Refs {
        env: EnvKind,
        #[arg(long, value_enum, default_value = "dense")]
        reward: RewardArg,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    method: Method,
    /// Training dataset (`.traj`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    /// TOML table of training settings (same keys as `[train]` in experiment configs).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `$OFFRL_OUTPUT_DIR` or `runs/<method>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Top-fraction filter size for non-sparse data.
    #[arg(long)]
    filter_fraction: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Rollouts per periodic evaluation; 0 disables evaluation.
    #[arg(long, default_value_t = 50)]
    rollouts: usize,
    #[arg(long)]
    rtg_target: Option<f64>,
    #[arg(long, requires = "expert_ref")]
    random_ref: Option<f64>,
    #[arg(long, requires = "random_ref")]
    expert_ref: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 50)]
    rollouts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the regime stored in the checkpoint.
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    /// Overrides the checkpoint's initial return-to-go.
    #[arg(long)]
    rtg_target: Option<f64>,
    #[arg(long, requires = "expert_ref")]
    random_ref: Option<f64>,
    #[arg(long, requires = "random_ref")]
    expert_ref: Option<f64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Arms trained concurrently; does not change any result.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Print the arm list and step counts without training.
    #[arg(long)]
    dry_run: bool,
    /// Bundle directory; overrides the config and `$OFFRL_OUTPUT_DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_dataset(ds: &TrajectoryDataset, path: &Path, text: bool) -> Result<()> {
    if text {
        save_dataset_text(ds, path)
    } else {
        save_dataset(ds, path)
    }
}

fn dataset_cmd(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Gen { env, reward, mixture, seed, text, output } => {
            let spec = GeneratorSpec::parse(&mixture)?;
            let ds = generate_dataset(env, reward.into(), &spec, seed)?;
            write_dataset(&ds, &output, text)?;
            println!("wrote {} trajectories ({} transitions) to {}", ds.len(), ds.total_transitions(), output.display());
        }
        DatasetCmd::Inspect { input, per_trajectory } => {
            let ds = load_dataset(&input)?;
            print!("{}", inspect(&ds, per_trajectory));
        }
        DatasetCmd::Sparsify { input, output, text } => {
            let ds = sparsify(&load_dataset(&input)?)?;
            write_dataset(&ds, &output, text)?;
            println!("wrote {} sparsified trajectories to {}", ds.len(), output.display());
        }
        DatasetCmd::Filter { mode, fraction, input, output, text } => {
            let ds = load_dataset(&input)?;
            let spec = match mode {
                None => FilterSpec::for_regime(ds.regime(), fraction),
                Some(FilterArg::Success) => FilterSpec::success(),
                Some(FilterArg::TopFraction) => FilterSpec::top_fraction(fraction)?,
            };
            let kept = apply_filter(&ds, &spec)?;
            write_dataset(&kept, &output, text)?;
            let how = match spec.mode {
                FilterMode::Success => "successful".to_owned(),
                FilterMode::TopFraction => format!("top {}", spec.fraction),
            };
            println!("kept {} / {} trajectories ({how}) in {}", kept.len(), ds.len(), output.display());
        }
        DatasetCmd::Refs { env, reward, episodes, seed } => {
            let r = reference_scores(env, reward.into(), episodes, seed)?;
            println!("random_ref = {}\nexpert_ref = {}", r.random, r.expert);
        }
    }
    Ok(())
}

fn inspect(ds: &TrajectoryDataset, per_trajectory: bool) -> String {
    use std::fmt::Write as _;
    let m = ds.meta();
    let mut out = String::new();
    let _ = writeln!(out, "env: {}", m.env_name);
    let _ = writeln!(out, "regime: {}", m.reward_regime);
    let _ = writeln!(out, "state_dim: {}  action_dim: {}  max_episode_length: {}", m.state_dim, m.action_dim, m.max_episode_length);
    let _ = writeln!(out, "trajectories: {}", ds.len());
    let _ = writeln!(out, "transitions: {}", ds.total_transitions());
    match ds.success_count() {
        Some(s) => {
            let _ = writeln!(out, "successful: {s} / {}", ds.len());
        }
        None => out.push_str("successful: n/a (no success flags)\n"),
    }
    let returns = ds.returns();
    if !returns.is_empty() {
        let q = |p| eval::stats::quantile(&returns, p);
        let _ = writeln!(
            out,
            "return: mean {} std {} min {} p25 {} median {} p75 {} max {}",
            eval::stats::mean(&returns),
            eval::stats::std(&returns),
            q(0.0),
            q(0.25),
            q(0.5),
            q(0.75),
            q(1.0)
        );
    }
    if per_trajectory {
        out.push_str("index,length,return,success\n");
        for (i, t) in ds.trajectories().iter().enumerate() {
            let s = t.success().map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{i},{},{},{s}", t.len(), t.total_return());
        }
    }
    out
}

fn output_dir(explicit: Option<PathBuf>, fallback: impl FnOnce() -> PathBuf) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("OFFRL_OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(fallback)
}

fn eval_mode(regime: RewardRegime) -> RewardMode {
    match regime {
        RewardRegime::Sparse => RewardMode::Sparse,
        _ => RewardMode::Dense,
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut overrides = match &a.config {
        Some(p) => TrainOverrides::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        })?)?,
        None => TrainOverrides::default(),
    };
    overrides.epochs = a.epochs.or(overrides.epochs);
    overrides.batch_size = a.batch_size.or(overrides.batch_size);
    overrides.lr = a.lr.or(overrides.lr);
    overrides.filter_fraction = a.filter_fraction.or(overrides.filter_fraction);
    let mut cfg = TrainConfig::new(a.method, a.seed);
    overrides.apply(&mut cfg);
    if let Some(e) = a.eval_every {
        cfg.eval_every_epochs = e;
    }
    if !a.method.is_filtered() {
        cfg.filter = None;
    } else if ds.regime() == RewardRegime::Sparse {
        cfg.filter = Some(FilterSpec::success());
    }
    cfg.rtg_target = a.rtg_target;
    cfg.validate()?;

    let mut evaluator = match (a.rollouts, EnvKind::from_name(&ds.meta().env_name)) {
        (0, _) => None,
        (n, Ok(env)) => {
            let spec = EvalSpec {
                env,
                reward: eval_mode(ds.regime()),
                n_rollouts: n,
                random_ref: a.random_ref,
                expert_ref: a.expert_ref,
            };
            let v = spec.violations();
            if !v.is_empty() {
                return Err(Error::Config(v));
            }
            Some(RolloutEvaluator { spec, seed: a.seed })
        }
        (_, Err(_)) => {
            eprintln!("note: no built-in environment named {:?}; training without evaluation", ds.meta().env_name);
            None
        }
    };
    let out_dir = output_dir(a.out, || PathBuf::from("runs").join(format!("{}-seed{}", a.method, a.seed)));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let outcome = train(&ds, &cfg, evaluator.as_mut().map(|e| e as &mut dyn Evaluator))?;
    let meta = |epoch: usize, step: u64| CheckpointMeta {
        method: a.method.name().to_owned(),
        env_name: ds.meta().env_name.clone(),
        seed: a.seed,
        step,
        epoch,
        rtg_target: outcome.rtg_target,
        regime: Some(ds.regime()),
    };
    save_checkpoint(
        &Checkpoint {
            policy: outcome.policy.clone(),
            meta: meta(cfg.epochs, outcome.steps),
        },
        out_dir.join("final.ckpt"),
    )?;
    if let Some(best) = &outcome.best {
        save_checkpoint(
            &Checkpoint {
                policy: best.policy.clone(),
                meta: meta(best.epoch, best.step),
            },
            out_dir.join("best.ckpt"),
        )?;
    }
    outcome.log.write_to(&out_dir)?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    std::fs::write(out_dir.join("config.json"), resolved).map_err(|e| Error::Io {
        path: out_dir.join("config.json").display().to_string(),
        source: e,
    })?;
    println!(
        "{}: {} steps on {} trajectories ({} transitions), {} parameters",
        a.method.label(),
        outcome.steps,
        outcome.train_trajectories,
        outcome.train_transitions,
        outcome.policy.param_count()
    );
    if let Some(best) = &outcome.best {
        println!("best score {} at epoch {}", best.score, best.epoch);
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let env = EnvKind::from_name(&ckpt.meta.env_name)?;
    let reward = match (a.reward, ckpt.meta.regime) {
        (Some(r), _) => r.into(),
        (None, Some(regime)) => eval_mode(regime),
        (None, None) => return Err(Error::InvalidArgument("checkpoint does not record a reward regime; pass --reward".into())),
    };
    let spec = EvalSpec {
        env,
        reward,
        n_rollouts: a.rollouts,
        random_ref: a.random_ref,
        expert_ref: a.expert_ref,
    };
    let v = spec.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let rtg = a.rtg_target.or(ckpt.meta.rtg_target);
    let (result, rollouts) = evaluate_policy(&ckpt.policy, &spec, rtg, a.seed, 0)?;
    let report = serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "method": ckpt.meta.method,
        "eval": spec,
        "seed": a.seed,
        "rtg_target": rtg,
        "result": result,
        "rollouts": rollouts,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match a.out {
        Some(p) => {
            std::fs::write(&p, text).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            println!("score {} over {} rollouts; wrote {}", result.score, result.rollouts, p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let datasets = cfg
        .datasets
        .iter()
        .map(|d| d.materialize(base))
        .collect::<Result<Vec<_>>>()?;
    if a.dry_run {
        print!("{}", eval::dry_run(&cfg, &datasets)?);
        return Ok(());
    }
    let dir = a.out.unwrap_or_else(|| cfg.output_dir(Path::new(".")));
    let outcome = run_benchmark(&cfg, &datasets, a.parallel)?;
    outcome.write_to(&dir)?;
    let summary = std::fs::read_to_string(dir.join("summary.txt")).unwrap_or_default();
    print!("{summary}");
    println!("wrote {}", dir.display());
    let failed: Vec<_> = outcome.failures().collect();
    if let Some(first) = failed.first() {
        for f in &failed {
            if let Err(e) = &f.result {
                eprintln!("{e}");
            }
        }
        return Err(Error::Arm {
            arm: first.spec.id(),
            message: format!("{} of {} arms failed; the bundle covers the rest", failed.len(), outcome.arms.len()),
        });
    }
    Ok(())
}

fn report_cmd(dir: PathBuf) -> Result<()> {
    let bundle = load_bundle(&dir)?;
    render_reports(&dir, &bundle)?;
    print!("{}", std::fs::read_to_string(dir.join("summary.txt")).unwrap_or_default());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(cmd) => dataset_cmd(cmd),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Report { dir } => report_cmd(dir),
    }
}

fn color() -> bool {
    std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty()) && std::io::stderr().is_terminal()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let label = if color() { "\x1b[31merror\x1b[0m" } else { "error" };
            eprintln!("{label}: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
