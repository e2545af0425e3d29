//! Behavior cloning, filtered behavior cloning, decision transformer and
//! filtered decision transformer training.
//!
//! The filtered methods are literal compositions: the filter materializes a
//! new dataset and the unfiltered trainer runs on it unchanged.

mod log;
mod sampler;

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{RewardRegime, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::policy::{DtBatch, DtConfig, DtPolicy, MlpConfig, MlpPolicy, Policy, PositionEncoding, StateNorm};
use crate::rewards::{apply_filter, FilterSpec, DEFAULT_TOP_FRACTION};
use crate::rng::SeedPath;
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, Graph, LrSchedule, Tensor};

pub use log::{EvalRecord, StepRecord, TrainLog};
pub use sampler::{TransitionSampler, WindowSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bc,
    Fbc,
    Dt,
    Fdt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bc, Method::Fbc, Method::Dt, Method::Fdt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bc => "bc",
            Method::Fbc => "fbc",
            Method::Dt => "dt",
            Method::Fdt => "fdt",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Bc => "BC",
            Method::Fbc => "FBC",
            Method::Dt => "DT",
            Method::Fdt => "FDT",
        }
    }

    pub fn is_filtered(self) -> bool {
        matches!(self, Method::Fbc | Method::Fdt)
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, Method::Dt | Method::Fdt)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bc" => Ok(Method::Bc),
            "fbc" => Ok(Method::Fbc),
            "dt" => Ok(Method::Dt),
            "fdt" => Ok(Method::Fdt),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?} (expected bc, fbc, dt or fdt)"))),
        }
    }
}

/// MLP width and depth; input and output sizes come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpShape {
    pub depth: usize,
    pub hidden: usize,
}

impl Default for MlpShape {
    fn default() -> Self {
        Self { depth: 2, hidden: 512 }
    }
}

/// Transformer hyperparameters; input and output sizes come from the
/// dataset. Unset options resolve from the reward regime: context 1 and
/// return scale 1 for sparse data, context 20 and return scale 1000
/// otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtShape {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub context_len: Option<usize>,
    pub max_episode_length: usize,
    pub rtg_scale: Option<f64>,
    pub position: PositionEncoding,
}

impl Default for DtShape {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 1,
            embed_dim: 128,
            dropout: 0.1,
            context_len: None,
            max_episode_length: 1000,
            rtg_scale: None,
            position: PositionEncoding::Sinusoidal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Defaults to 100 for the MLP methods and 512 for the transformer ones.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::lr")]
    pub weight_decay: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "defaults::warmup_steps")]
    pub warmup_steps: u64,
    #[serde(default = "defaults::lr_decay_epoch")]
    pub lr_decay_epoch: usize,
    #[serde(default = "defaults::lr_decay_factor")]
    pub lr_decay_factor: f64,
    /// Only for the filtered methods; defaults to the success filter on
    /// sparse data and the top 10% on anything else.
    #[serde(default)]
    pub filter: Option<FilterSpec>,
    #[serde(default = "defaults::eval_every_epochs")]
    pub eval_every_epochs: usize,
    #[serde(default)]
    pub mlp: MlpShape,
    #[serde(default)]
    pub dt: DtShape,
    /// Initial return-to-go for transformer rollouts. Defaults to 1 on
    /// sparse data and to the largest trajectory return otherwise.
    #[serde(default)]
    pub rtg_target: Option<f64>,
}

mod defaults {
    pub fn epochs() -> usize {
        100
    }
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn grad_clip() -> f64 {
        0.25
    }
    pub fn warmup_steps() -> u64 {
        100_000
    }
    pub fn lr_decay_epoch() -> usize {
        80
    }
    pub fn lr_decay_factor() -> f64 {
        0.1
    }
    pub fn eval_every_epochs() -> usize {
        50
    }
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            epochs: defaults::epochs(),
            batch_size: None,
            lr: defaults::lr(),
            weight_decay: defaults::lr(),
            grad_clip: defaults::grad_clip(),
            warmup_steps: defaults::warmup_steps(),
            lr_decay_epoch: defaults::lr_decay_epoch(),
            lr_decay_factor: defaults::lr_decay_factor(),
            filter: None,
            eval_every_epochs: defaults::eval_every_epochs(),
            mlp: MlpShape::default(),
            dt: DtShape::default(),
            rtg_target: None,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
            .unwrap_or(if self.method.is_transformer() { 512 } else { 100 })
    }

    /// Every problem with the configuration, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            v.push("batch_size must be at least 1".into());
        }
        for (name, x) in [("lr", self.lr), ("weight_decay", self.weight_decay), ("grad_clip", self.grad_clip)] {
            if !(x.is_finite() && x >= 0.0) {
                v.push(format!("{name} must be a finite non-negative number, got {x}"));
            }
        }
        if self.grad_clip == 0.0 {
            v.push("grad_clip must be positive".into());
        }
        if self.warmup_steps == 0 {
            v.push("warmup_steps must be at least 1".into());
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            v.push(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if self.eval_every_epochs == 0 {
            v.push("eval_every_epochs must be at least 1".into());
        }
        if let Some(f) = &self.filter {
            if !self.method.is_filtered() {
                v.push(format!("a filter is only meaningful for fbc and fdt, not {}", self.method));
            }
            if let Err(e) = f.validate() {
                v.push(e.to_string());
            }
        }
        if let Some(t) = self.rtg_target {
            if !t.is_finite() {
                v.push(format!("rtg_target must be finite, got {t}"));
            }
        }
        if self.method.is_transformer() {
            if self.dt.context_len == Some(0) {
                v.push("dt.context_len must be at least 1".into());
            }
            if self.dt.heads == 0 || self.dt.embed_dim == 0 || self.dt.embed_dim % self.dt.heads != 0 {
                v.push(format!(
                    "dt.embed_dim ({}) must be a positive multiple of dt.heads ({})",
                    self.dt.embed_dim, self.dt.heads
                ));
            }
            if !(0.0..1.0).contains(&self.dt.dropout) {
                v.push(format!("dt.dropout must lie in [0, 1), got {}", self.dt.dropout));
            }
            if let Some(s) = self.dt.rtg_scale {
                if !(s.is_finite() && s > 0.0) {
                    v.push(format!("dt.rtg_scale must be positive, got {s}"));
                }
            }
        } else if self.mlp.depth > 0 && self.mlp.hidden == 0 {
            v.push("mlp.hidden must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Filter actually applied for this method on data of `regime`.
    pub fn resolved_filter(&self, regime: RewardRegime) -> Option<FilterSpec> {
        self.method
            .is_filtered()
            .then(|| self.filter.unwrap_or_else(|| FilterSpec::for_regime(regime, DEFAULT_TOP_FRACTION)))
    }

    pub fn context_len(&self, regime: RewardRegime) -> usize {
        self.dt
            .context_len
            .unwrap_or(if regime == RewardRegime::Sparse { 1 } else { 20 })
    }

    pub fn rtg_scale(&self, regime: RewardRegime) -> f64 {
        self.dt
            .rtg_scale
            .unwrap_or(if regime == RewardRegime::Sparse { 1.0 } else { 1000.0 })
    }

    /// Architecture this config trains on `ds`.
    pub fn policy_config(&self, ds: &TrajectoryDataset) -> crate::policy::PolicyConfig {
        let m = ds.meta();
        if self.method.is_transformer() {
            crate::policy::PolicyConfig::Dt(DtConfig {
                state_dim: m.state_dim,
                action_dim: m.action_dim,
                layers: self.dt.layers,
                heads: self.dt.heads,
                embed_dim: self.dt.embed_dim,
                dropout: self.dt.dropout,
                context_len: self.context_len(m.reward_regime),
                max_episode_length: self.dt.max_episode_length,
                rtg_scale: self.rtg_scale(m.reward_regime),
                position: self.dt.position,
            })
        } else {
            crate::policy::PolicyConfig::Mlp(MlpConfig {
                state_dim: m.state_dim,
                action_dim: m.action_dim,
                depth: self.mlp.depth,
                hidden: self.mlp.hidden,
            })
        }
    }

    /// Optimizer steps per epoch on a dataset with this many transitions.
    pub fn steps_per_epoch(&self, transitions: usize) -> usize {
        transitions.div_ceil(self.batch_size())
    }
}

/// Result of one periodic evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Headline number: success rate on sparse tasks, normalized score on
    /// dense ones.
    pub score: f64,
    pub mean_return: f64,
    pub success_rate: Option<f64>,
    pub rollouts: usize,
}

/// Periodic evaluation hook called by the trainers. `eval_index` counts
/// evaluations within a run from 0.
pub trait Evaluator {
    fn evaluate(&mut self, policy: &Policy, rtg_target: Option<f64>, eval_index: usize) -> Result<EvalResult>;
}

/// Snapshot taken at the best evaluation so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub policy: Policy,
    pub epoch: usize,
    pub step: u64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub best: Option<BestSnapshot>,
    pub log: TrainLog,
    pub rtg_target: Option<f64>,
    pub steps: u64,
    pub train_trajectories: usize,
    pub train_transitions: usize,
    /// Wall-clock seconds per epoch. Not part of the log, which must be
    /// reproducible.
    pub epoch_seconds: Vec<f64>,
}

/// Dataset a method actually trains on.
pub fn training_set(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<TrajectoryDataset> {
    match cfg.resolved_filter(ds.regime()) {
        Some(spec) => apply_filter(ds, &spec),
        None => Ok(ds.clone()),
    }
}

/// Trains `cfg.method` on `ds`.
pub fn train(ds: &TrajectoryDataset, cfg: &TrainConfig, eval: Option<&mut dyn Evaluator>) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.method {
        Method::Bc | Method::Dt => train_unfiltered(ds, cfg, eval),
        Method::Fbc | Method::Fdt => {
            let filtered = training_set(ds, cfg)?;
            train_unfiltered(&filtered, cfg, eval)
        }
    }
}

fn train_unfiltered(ds: &TrajectoryDataset, cfg: &TrainConfig, eval: Option<&mut dyn Evaluator>) -> Result<TrainOutcome> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.method.is_transformer() {
        fit_dt(ds, cfg, eval)
    } else {
        fit_mlp(ds, cfg, eval)
    }
}

pub fn train_bc(ds: &TrajectoryDataset, cfg: &TrainConfig, eval: Option<&mut dyn Evaluator>) -> Result<TrainOutcome> {
    train(ds, &TrainConfig { method: Method::Bc, filter: None, ..cfg.clone() }, eval)
}

pub fn train_fbc(ds: &TrajectoryDataset, cfg: &TrainConfig, eval: Option<&mut dyn Evaluator>) -> Result<TrainOutcome> {
    train(ds, &TrainConfig { method: Method::Fbc, ..cfg.clone() }, eval)
}

pub fn train_dt(ds: &TrajectoryDataset, cfg: &TrainConfig, eval: Option<&mut dyn Evaluator>) -> Result<TrainOutcome> {
    train(ds, &TrainConfig { method: Method::Dt, filter: None, ..cfg.clone() }, eval)
}

pub fn train_fdt(ds: &TrajectoryDataset, cfg: &TrainConfig, eval: Option<&mut dyn Evaluator>) -> Result<TrainOutcome> {
    train(ds, &TrainConfig { method: Method::Fdt, ..cfg.clone() }, eval)
}

/// Default initial return-to-go for rollouts of a transformer trained on
/// `ds`.
pub fn default_rtg_target(ds: &TrajectoryDataset) -> f64 {
    match ds.regime() {
        RewardRegime::Sparse => 1.0,
        _ => ds.returns().into_iter().fold(f64::NEG_INFINITY, f64::max),
    }
}

struct Loop<'a, 'e> {
    cfg: &'a TrainConfig,
    eval: Option<&'e mut dyn Evaluator>,
    log: TrainLog,
    best: Option<BestSnapshot>,
    rtg_target: Option<f64>,
    step: u64,
    epoch_seconds: Vec<f64>,
}

impl<'a, 'e> Loop<'a, 'e> {
    fn new(cfg: &'a TrainConfig, eval: Option<&'e mut dyn Evaluator>, rtg_target: Option<f64>) -> Self {
        Self {
            cfg,
            eval,
            log: TrainLog::default(),
            best: None,
            rtg_target,
            step: 0,
            epoch_seconds: Vec::new(),
        }
    }

    fn record_step(&mut self, epoch: usize, lr: f64, loss: f64, pre: f64, post: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        self.log.steps.push(StepRecord {
            step: self.step,
            epoch,
            lr,
            loss,
            grad_norm: pre,
            clipped_grad_norm: post,
        });
        self.step += 1;
        Ok(())
    }

    fn end_epoch(&mut self, epoch: usize, steps_in_epoch: usize, started: Instant, snapshot: &dyn Fn() -> Policy) -> Result<()> {
        let done = epoch + 1;
        let is_eval = done % self.cfg.eval_every_epochs == 0 || done == self.cfg.epochs;
        if is_eval {
            let recent = &self.log.steps[self.log.steps.len() - steps_in_epoch..];
            let train_loss = recent.iter().map(|s| s.loss).sum::<f64>() / steps_in_epoch as f64;
            let index = self.log.evals.len();
            let policy = snapshot();
            let result = match self.eval.as_deref_mut() {
                Some(e) => Some(e.evaluate(&policy, self.rtg_target, index)?),
                None => None,
            };
            let prev_best = self.log.evals.last().and_then(|r| r.best_score);
            let best_score = match (prev_best, result) {
                (Some(b), Some(r)) => Some(b.max(r.score)),
                (None, Some(r)) => Some(r.score),
                (b, None) => b,
            };
            if let Some(r) = result {
                if self.best.as_ref().is_none_or(|b| r.score > b.score) {
                    self.best = Some(BestSnapshot {
                        policy,
                        epoch: done,
                        step: self.step,
                        score: r.score,
                    });
                }
            }
            self.log.evals.push(EvalRecord {
                epoch: done,
                step: self.step,
                train_loss,
                score: result.map(|r| r.score),
                mean_return: result.map(|r| r.mean_return),
                success_rate: result.and_then(|r| r.success_rate),
                best_score,
            });
        }
        self.epoch_seconds.push(started.elapsed().as_secs_f64());
        Ok(())
    }

    fn finish(self, policy: Policy, ds: &TrajectoryDataset) -> TrainOutcome {
        TrainOutcome {
            policy,
            best: self.best,
            log: self.log,
            rtg_target: self.rtg_target,
            steps: self.step,
            train_trajectories: ds.len(),
            train_transitions: ds.total_transitions(),
            epoch_seconds: self.epoch_seconds,
        }
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    }
}

fn fit_mlp(ds: &TrajectoryDataset, cfg: &TrainConfig, eval: Option<&mut dyn Evaluator>) -> Result<TrainOutcome> {
    let root = SeedPath::new(cfg.seed);
    let crate::policy::PolicyConfig::Mlp(arch) = cfg.policy_config(ds) else {
        unreachable!("mlp method")
    };
    let mut policy = MlpPolicy::new(arch, &mut root.child("init").rng())?;
    let (ds_dim, da) = (ds.meta().state_dim, ds.meta().action_dim);
    policy.set_state_norm(StateNorm::fit(ds_dim, ds.trajectories().iter().flat_map(|t| t.states().chunks_exact(ds_dim))))?;

    let sampler = TransitionSampler::new(ds);
    let mut batch_rng = root.child("batch").rng();
    let schedule = LrSchedule::StepDecay {
        lr: cfg.lr,
        milestone: cfg.lr_decay_epoch,
        factor: cfg.lr_decay_factor,
    };
    let mut opt = AdamW::new(adam_config(cfg), policy.params());
    let bs = cfg.batch_size();
    let steps_per_epoch = cfg.steps_per_epoch(ds.total_transitions());
    let mut lp = Loop::new(cfg, eval, None);
    let mut states = vec![0.0; bs * ds_dim];
    let mut actions = vec![0.0; bs * da];

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        for _ in 0..steps_per_epoch {
            sampler.fill(&mut batch_rng, &mut states, &mut actions);
            let x = Tensor::new(vec![bs, ds_dim], states.clone())?;
            let y = Tensor::new(vec![bs, da], actions.clone())?;
            let (loss, mut grads) = {
                let mut g = Graph::new();
                let pred = policy.forward(&mut g, &x)?;
                let loss = g.mse_loss(pred, &y)?;
                let value = g.value(loss).data()[0];
                (value, g.backward(loss)?.params(policy.params()))
            };
            let (pre, post) = clip_grad_norm(&mut grads, cfg.grad_clip);
            let lr = schedule.lr(lp.step, epoch);
            opt.step(policy.params_mut(), &grads, lr)?;
            lp.record_step(epoch, lr, loss, pre, post)?;
        }
        lp.end_epoch(epoch, steps_per_epoch, started, &|| Policy::Mlp(policy.clone()))?;
    }
    Ok(lp.finish(Policy::Mlp(policy), ds))
}

fn fit_dt(ds: &TrajectoryDataset, cfg: &TrainConfig, eval: Option<&mut dyn Evaluator>) -> Result<TrainOutcome> {
    let root = SeedPath::new(cfg.seed);
    let crate::policy::PolicyConfig::Dt(arch) = cfg.policy_config(ds) else {
        unreachable!("transformer method")
    };
    let k = arch.context_len;
    if k > ds.meta().max_episode_length {
        return Err(Error::InvalidArgument(format!(
            "context length {k} exceeds the dataset's max episode length {}",
            ds.meta().max_episode_length
        )));
    }
    if ds.meta().max_episode_length > arch.max_episode_length {
        return Err(Error::InvalidArgument(format!(
            "dataset episodes run up to {} steps but the transformer only encodes {} timesteps",
            ds.meta().max_episode_length,
            arch.max_episode_length
        )));
    }
    let mut policy = DtPolicy::new(arch, &mut root.child("init").rng())?;
    let d = ds.meta().state_dim;
    policy.set_state_norm(StateNorm::fit(d, ds.trajectories().iter().flat_map(|t| t.states().chunks_exact(d))))?;
    let rtg_target = cfg.rtg_target.unwrap_or_else(|| default_rtg_target(ds));

    let sampler = WindowSampler::new(ds, k);
    let mut batch_rng = root.child("batch").rng();
    let mut dropout_rng = root.child("dropout").rng();
    let schedule = LrSchedule::Warmup {
        lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
    };
    let mut opt = AdamW::new(adam_config(cfg), policy.params());
    let bs = cfg.batch_size();
    let steps_per_epoch = cfg.steps_per_epoch(ds.total_transitions());
    let mut lp = Loop::new(cfg, eval, Some(rtg_target));
    let mut batch = DtBatch::zeros(bs, k, d, ds.meta().action_dim);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        for _ in 0..steps_per_epoch {
            sampler.fill(&mut batch_rng, &mut batch);
            let target = Tensor::new(vec![bs, k, ds.meta().action_dim], batch.actions.clone())?;
            let (loss, mut grads) = {
                let mut g = Graph::new();
                let pred = policy.forward(&mut g, &batch, Some(&mut dropout_rng))?;
                let loss = g.masked_mse_loss(pred, &target, Some(&batch.valid))?;
                let value = g.value(loss).data()[0];
                (value, g.backward(loss)?.params(policy.params()))
            };
            let (pre, post) = clip_grad_norm(&mut grads, cfg.grad_clip);
            let lr = schedule.lr(lp.step, epoch);
            opt.step(policy.params_mut(), &grads, lr)?;
            lp.record_step(epoch, lr, loss, pre, post)?;
        }
        lp.end_epoch(epoch, steps_per_epoch, started, &|| Policy::Dt(policy.clone()))?;
    }
    Ok(lp.finish(Policy::Dt(policy), ds))
}
