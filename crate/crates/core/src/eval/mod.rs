//! Rollouts, return-to-go bookkeeping for transformer inference, scores,
//! and the benchmark harness.

mod bench;
mod report;
pub mod stats;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::env::{clamp_action, EnvKind, Environment, RewardMode};
use crate::error::{Error, Result};
use crate::policy::{DtPolicy, Policy};
use crate::rng::SeedPath;
use crate::train::{EvalResult, Evaluator};

pub use bench::{arm_list, dry_run, run_benchmark, ArmOutcome, ArmSpec, BenchOutcome};
pub use report::{load_bundle, render_reports, write_bundle, Bundle, Curve, CurvePoint, Manifest, SummaryCell};

/// `100 * (raw - random_ref) / (expert_ref - random_ref)`.
pub fn normalized_score(raw: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    let span = expert_ref - random_ref;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "degenerate reference scores: random {random_ref}, expert {expert_ref}"
        )));
    }
    Ok(100.0 * (raw - random_ref) / span)
}

/// Return-conditioned inference state for one episode.
///
/// Keeps the last `K` (return-to-go, state, action) triplets. The
/// return-to-go token for the current step is always
/// `target - (sum of rewards observed so far)`.
pub struct DtSession<'a> {
    policy: &'a DtPolicy,
    target: f64,
    reward_sum: f64,
    t: usize,
    rtg: VecDeque<f64>,
    states: VecDeque<Vec<f64>>,
    actions: VecDeque<Vec<f64>>,
    timesteps: VecDeque<usize>,
    awaiting_reward: bool,
}

impl<'a> DtSession<'a> {
    pub fn new(policy: &'a DtPolicy, rtg_target: f64) -> Self {
        Self {
            policy,
            target: rtg_target,
            reward_sum: 0.0,
            t: 0,
            rtg: VecDeque::new(),
            states: VecDeque::new(),
            actions: VecDeque::new(),
            timesteps: VecDeque::new(),
            awaiting_reward: false,
        }
    }

    pub fn current_rtg(&self) -> f64 {
        self.target - self.reward_sum
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn window_len(&self) -> usize {
        self.rtg.len()
    }

    /// Return-to-go tokens currently in the window, oldest first.
    pub fn rtg_window(&self) -> impl Iterator<Item = f64> + '_ {
        self.rtg.iter().copied()
    }

    /// Appends the new state and predicts its action.
    pub fn act(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.policy.config();
        if state.len() != cfg.state_dim {
            return Err(Error::Dimension {
                what: "session state".into(),
                expected: cfg.state_dim,
                found: state.len(),
            });
        }
        if self.awaiting_reward {
            return Err(Error::InvalidArgument("act called twice without observe".into()));
        }
        self.rtg.push_back(self.current_rtg());
        self.states.push_back(state.to_vec());
        self.actions.push_back(vec![0.0; cfg.action_dim]);
        self.timesteps.push_back(self.t.min(cfg.max_episode_length - 1));
        if self.rtg.len() > cfg.context_len {
            self.rtg.pop_front();
            self.states.pop_front();
            self.actions.pop_front();
            self.timesteps.pop_front();
        }
        assert!(self.rtg.len() <= cfg.context_len, "session window exceeds context length");
        let rtg: Vec<f64> = self.rtg.iter().copied().collect();
        let states: Vec<f64> = self.states.iter().flatten().copied().collect();
        let actions: Vec<f64> = self.actions.iter().flatten().copied().collect();
        let ts: Vec<usize> = self.timesteps.iter().copied().collect();
        let action = clamp_action(&self.policy.predict_last(&rtg, &states, &actions, &ts)?);
        *self.actions.back_mut().expect("window is non-empty") = action.clone();
        self.awaiting_reward = true;
        Ok(action)
    }

    /// Records the reward that followed the last action.
    pub fn observe(&mut self, reward: f64) {
        self.reward_sum += reward;
        self.t += 1;
        self.awaiting_reward = false;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    pub total_return: f64,
    pub success: Option<bool>,
}

fn check_policy_dims(policy: &Policy, env: &dyn Environment) -> Result<()> {
    for (what, want, got) in [
        ("policy state", env.state_dim(), policy.state_dim()),
        ("policy action", env.action_dim(), policy.action_dim()),
    ] {
        if want != got {
            return Err(Error::Dimension {
                what: what.into(),
                expected: want,
                found: got,
            });
        }
    }
    Ok(())
}

/// One episode from `env.reset(seed)`. Transformer policies need an
/// initial return-to-go; `on_step` sees the session after each reward.
pub fn rollout_with(
    policy: &Policy,
    env: &mut dyn Environment,
    seed: u64,
    rtg_target: Option<f64>,
    on_step: &mut dyn FnMut(&DtSession<'_>),
) -> Result<RolloutResult> {
    check_policy_dims(policy, env)?;
    let mut state = env.reset(seed);
    let mut session = match policy {
        Policy::Dt(p) => Some(DtSession::new(
            p,
            rtg_target.ok_or_else(|| Error::InvalidArgument("transformer rollout needs an rtg target".into()))?,
        )),
        Policy::Mlp(_) => None,
    };
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    loop {
        let action = match (&mut session, policy) {
            (Some(s), _) => s.act(&state)?,
            (None, Policy::Mlp(p)) => clamp_action(&p.act(&state)?),
            (None, Policy::Dt(_)) => unreachable!("session exists for transformer policies"),
        };
        let out = env.step(&action)?;
        if let Some(s) = &mut session {
            s.observe(out.reward);
            on_step(s);
        }
        states.extend_from_slice(&state);
        actions.extend_from_slice(&action);
        rewards.push(out.reward);
        state = out.state;
        if out.done {
            break;
        }
    }
    let success = env.success();
    let trajectory = Trajectory::from_flat(env.state_dim(), env.action_dim(), states, actions, rewards, success)?;
    Ok(RolloutResult {
        total_return: trajectory.total_return(),
        trajectory,
        success,
    })
}

pub fn rollout(policy: &Policy, env: &mut dyn Environment, seed: u64, rtg_target: Option<f64>) -> Result<RolloutResult> {
    rollout_with(policy, env, seed, rtg_target, &mut |_| {})
}

/// Where and how a policy is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub env: EnvKind,
    pub reward: RewardMode,
    #[serde(default = "default_rollouts")]
    pub n_rollouts: usize,
    /// References for normalized scores. Without them the score is the
    /// success rate (sparse tasks) or the raw mean return.
    #[serde(default)]
    pub random_ref: Option<f64>,
    #[serde(default)]
    pub expert_ref: Option<f64>,
}

fn default_rollouts() -> usize {
    50
}

impl EvalSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_rollouts == 0 {
            v.push("n_rollouts must be at least 1".into());
        }
        if self.env == EnvKind::ChainRun && self.reward == RewardMode::Sparse {
            v.push("chainrun has no sparse reward mode".into());
        }
        match (self.random_ref, self.expert_ref) {
            (Some(r), Some(e)) if r == e => v.push(format!("expert_ref and random_ref must differ (both {r})")),
            (Some(_), None) | (None, Some(_)) => v.push("random_ref and expert_ref must be given together".into()),
            _ => {}
        }
        v
    }

    /// Reset seed of rollout `rollout` at evaluation `eval_index` of the run
    /// seeded with `seed`.
    pub fn rollout_seed(seed: u64, eval_index: usize, rollout: usize) -> u64 {
        SeedPath::new(seed)
            .child("eval")
            .index(eval_index as u64)
            .index(rollout as u64)
            .seed_u64()
    }
}

/// Per-rollout records of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub rollout: usize,
    pub seed: u64,
    pub total_return: f64,
    pub success: Option<bool>,
    pub length: usize,
}

/// Runs `spec.n_rollouts` episodes and scores them.
pub fn evaluate_policy(
    policy: &Policy,
    spec: &EvalSpec,
    rtg_target: Option<f64>,
    seed: u64,
    eval_index: usize,
) -> Result<(EvalResult, Vec<RolloutRecord>)> {
    let mut env = spec.env.make(spec.reward)?;
    let mut records = Vec::with_capacity(spec.n_rollouts);
    for i in 0..spec.n_rollouts {
        let s = EvalSpec::rollout_seed(seed, eval_index, i);
        let r = rollout(policy, env.as_mut(), s, rtg_target)?;
        records.push(RolloutRecord {
            rollout: i,
            seed: s,
            total_return: r.total_return,
            success: r.success,
            length: r.trajectory.len(),
        });
    }
    let returns: Vec<f64> = records.iter().map(|r| r.total_return).collect();
    let mean_return = stats::mean(&returns);
    let success_rate = if records.iter().all(|r| r.success.is_some()) {
        let wins: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.success == Some(true)))).collect();
        Some(stats::mean(&wins))
    } else {
        None
    };
    let score = match (spec.random_ref, spec.expert_ref) {
        (Some(r), Some(e)) => normalized_score(mean_return, r, e)?,
        _ => match (spec.reward, success_rate) {
            (RewardMode::Sparse, Some(s)) => s,
            _ => mean_return,
        },
    };
    let result = EvalResult {
        score,
        mean_return,
        success_rate,
        rollouts: records.len(),
    };
    Ok((result, records))
}

/// Periodic evaluator used during training.
pub struct RolloutEvaluator {
    pub spec: EvalSpec,
    pub seed: u64,
}

impl Evaluator for RolloutEvaluator {
    fn evaluate(&mut self, policy: &Policy, rtg_target: Option<f64>, eval_index: usize) -> Result<EvalResult> {
        evaluate_policy(policy, &self.spec, rtg_target, self.seed, eval_index).map(|(r, _)| r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_score_anchors() {
        assert_eq!(normalized_score(3.0, 3.0, 11.0).unwrap(), 0.0);
        assert_eq!(normalized_score(11.0, 3.0, 11.0).unwrap(), 100.0);
        assert_eq!(normalized_score(7.0, 3.0, 11.0).unwrap(), 50.0);
        assert!(normalized_score(1.0, 2.0, 2.0).is_err());
    }
}
