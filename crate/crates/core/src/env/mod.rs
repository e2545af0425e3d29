//! Toy control tasks and scripted data generators.
//!
//! **PointReach** (sparse or dense). Arena `[-1, 1]^2`; state
//! `[px, py, gx, gy]`; action `[ax, ay]`, each component clamped to
//! `[-1, 1]`. Each step moves `p <- clamp(p + 0.05 * a, -1, 1)`. The episode
//! ends when `|p - g| < 0.1` or after 50 steps. Sparse reward: 1 on the
//! final step if `|p - g| < 0.1` there, else 0. Dense reward: `-|p - g|`
//! after every step. Start and goal are uniform in the arena.
//!
//! **ChainRun** (dense). State `[x, v]`; action `[a]` clamped to `[-1, 1]`.
//! Each step `v <- 0.9 v + 0.1 a`, `x <- x + v`, reward `v` (the
//! displacement). Episodes last 100 steps and start at rest with
//! `x ~ U(-0.1, 0.1)`. A constant full-throttle action earns
//! `sum_{t=1..100} (1 - 0.9^t)`.

mod chainrun;
mod generate;
mod pointreach;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub use chainrun::ChainRun;
pub use generate::{
    can_like_fixture, generate_dataset, lift_like_fixture, mg_fixture, reference_scores, rollout_scripted,
    GeneratorSpec, MixtureEntry, Quality, ReferenceScores, ScriptedPolicy,
};
pub use pointreach::PointReach;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    PointReach,
    ChainRun,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointReach => "pointreach",
            EnvKind::ChainRun => "chainrun",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pointreach" => Ok(EnvKind::PointReach),
            "chainrun" => Ok(EnvKind::ChainRun),
            _ => Err(Error::InvalidArgument(format!(
                "unknown environment {name:?} (expected pointreach or chainrun)"
            ))),
        }
    }

    pub fn make(self, mode: RewardMode) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvKind::PointReach => Box::new(PointReach::new(mode)),
            EnvKind::ChainRun => {
                if mode == RewardMode::Sparse {
                    return Err(Error::InvalidArgument("chainrun only has dense rewards".into()));
                }
                Box::new(ChainRun::new())
            }
        })
    }

    /// Action of the scripted expert.
    pub fn expert_action(self, state: &[f64]) -> Vec<f64> {
        match self {
            EnvKind::PointReach => pointreach::expert_action(state),
            EnvKind::ChainRun => vec![1.0],
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment with a `reset`/`step` interface.
pub trait Environment: Send {
    fn kind(&self) -> EnvKind;
    fn reward_mode(&self) -> RewardMode;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;

    /// Starts an episode from a start state derived from `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advances one step. Actions are clamped to `[-1, 1]` per component.
    /// Stepping before `reset` or after the episode ended is an error.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;

    /// Whether the finished episode counts as a success; `None` for tasks
    /// without a success notion.
    fn success(&self) -> Option<bool>;

    fn name(&self) -> &'static str {
        self.kind().name()
    }
}

pub fn clamp_action(action: &[f64]) -> Vec<f64> {
    action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

pub(crate) fn check_action(env: &dyn Environment, action: &[f64]) -> Result<()> {
    if action.len() != env.action_dim() {
        return Err(Error::Dimension {
            what: format!("{} action", env.name()),
            expected: env.action_dim(),
            found: action.len(),
        });
    }
    if action.iter().any(|a| a.is_nan()) {
        return Err(Error::NonFinite(format!("{} action", env.name())));
    }
    Ok(())
}

pub(crate) fn episode_over() -> Error {
    Error::InvalidArgument("step called outside an episode (reset first)".into())
}

/// Uniform draw in `[-1, 1]`.
pub(crate) fn unit(rng: &mut StreamRng) -> f64 {
    use rand::Rng;
    rng.random_range(-1.0..=1.0)
}
