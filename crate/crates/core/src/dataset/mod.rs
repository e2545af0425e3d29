//! Trajectory data model and return computations.

mod io;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode, encode_binary, encode_text, load_dataset, save_dataset, save_dataset_text};

/// How rewards in a dataset are distributed over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardRegime {
    /// Per-step rewards as produced by the environment.
    Dense,
    /// Binary reward on the terminal step only: 1 for success, 0 otherwise.
    Sparse,
    /// Dense rewards whose total has been moved onto the terminal step.
    Sparsified,
}

impl RewardRegime {
    pub(crate) fn code(self) -> u8 {
        match self {
            RewardRegime::Dense => 0,
            RewardRegime::Sparse => 1,
            RewardRegime::Sparsified => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RewardRegime::Dense),
            1 => Some(RewardRegime::Sparse),
            2 => Some(RewardRegime::Sparsified),
            _ => None,
        }
    }
}

impl fmt::Display for RewardRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardRegime::Dense => "dense",
            RewardRegime::Sparse => "sparse",
            RewardRegime::Sparsified => "sparsified",
        })
    }
}

impl std::str::FromStr for RewardRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(RewardRegime::Dense),
            "sparse" => Ok(RewardRegime::Sparse),
            "sparsified" => Ok(RewardRegime::Sparsified),
            other => Err(Error::InvalidArgument(format!(
                "unknown reward regime {other:?} (expected dense, sparse or sparsified)"
            ))),
        }
    }
}

/// One `(state, action, reward)` step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Borrowed view of a single step inside a [`Trajectory`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub reward: f64,
}

/// An episode: `T >= 1` steps stored as row-major state/action matrices plus
/// a reward vector, with an optional success label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    success: Option<bool>,
}

impl Trajectory {
    /// Builds a trajectory from flattened arrays. `states` holds
    /// `len * state_dim` values, `actions` holds `len * action_dim`.
    pub fn from_flat(
        state_dim: usize,
        action_dim: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        success: Option<bool>,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::Dimension {
                what: "state dimension (must be >= 1)".into(),
                expected: 1,
                found: 0,
            });
        }
        if action_dim == 0 {
            return Err(Error::Dimension {
                what: "action dimension (must be >= 1)".into(),
                expected: 1,
                found: 0,
            });
        }
        let len = rewards.len();
        if len == 0 {
            return Err(Error::InvalidDataset("trajectory has no steps".into()));
        }
        if states.len() != len * state_dim {
            return Err(Error::Dimension {
                what: "state array length".into(),
                expected: len * state_dim,
                found: states.len(),
            });
        }
        if actions.len() != len * action_dim {
            return Err(Error::Dimension {
                what: "action array length".into(),
                expected: len * action_dim,
                found: actions.len(),
            });
        }
        if let Some(i) = states
            .iter()
            .chain(&actions)
            .chain(&rewards)
            .position(|v| !v.is_finite())
        {
            return Err(Error::InvalidDataset(format!(
                "non-finite value at flat position {i}"
            )));
        }
        Ok(Self {
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            success,
        })
    }

    pub fn from_transitions(
        transitions: impl IntoIterator<Item = Transition>,
        success: Option<bool>,
    ) -> Result<Self> {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut dims = None;
        for (t, tr) in transitions.into_iter().enumerate() {
            let (ds, da) = *dims.get_or_insert((tr.state.len(), tr.action.len()));
            if tr.state.len() != ds {
                return Err(Error::Dimension {
                    what: format!("state at step {t}"),
                    expected: ds,
                    found: tr.state.len(),
                });
            }
            if tr.action.len() != da {
                return Err(Error::Dimension {
                    what: format!("action at step {t}"),
                    expected: da,
                    found: tr.action.len(),
                });
            }
            states.extend_from_slice(&tr.state);
            actions.extend_from_slice(&tr.action);
            rewards.push(tr.reward);
        }
        let (ds, da) = dims.ok_or_else(|| Error::InvalidDataset("trajectory has no steps".into()))?;
        Self::from_flat(ds, da, states, actions, rewards, success)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    /// Always false: trajectories hold at least one step.
    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn step(&self, t: usize) -> Step<'_> {
        Step {
            state: self.state(t),
            action: self.action(t),
            reward: self.rewards[t],
        }
    }

    pub fn steps(&self) -> impl Iterator<Item = Step<'_>> + '_ {
        (0..self.len()).map(move |t| self.step(t))
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn success(&self) -> Option<bool> {
        self.success
    }

    pub fn final_reward(&self) -> f64 {
        self.rewards[self.len() - 1]
    }

    /// Same states and actions with replaced rewards and success label.
    pub fn with_rewards(&self, rewards: Vec<f64>, success: Option<bool>) -> Result<Self> {
        Self::from_flat(
            self.state_dim,
            self.action_dim,
            self.states.clone(),
            self.actions.clone(),
            rewards,
            success,
        )
    }

    /// Sum of all rewards of the episode.
    pub fn total_return(&self) -> f64 {
        total_return(self)
    }

    pub fn returns_to_go(&self) -> Vec<f64> {
        returns_to_go(self)
    }
}

/// Sum of all rewards of a trajectory.
///
/// The sum is accumulated from the last step backwards, the same recurrence
/// used by [`returns_to_go`], so `returns_to_go(t)[0] == total_return(t)`
/// holds bit-for-bit.
pub fn total_return(traj: &Trajectory) -> f64 {
    traj.rewards.iter().rev().fold(0.0, |acc, &r| r + acc)
}

/// Suffix sums of the rewards: `out[j] = r[j] + out[j + 1]`.
pub fn returns_to_go(traj: &Trajectory) -> Vec<f64> {
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for (o, &r) in out.iter_mut().zip(&traj.rewards).rev() {
        acc = r + acc;
        *o = acc;
    }
    out
}

/// Dataset-wide metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_episode_length: usize,
    pub reward_regime: RewardRegime,
}

/// An immutable collection of trajectories sharing one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    meta: DatasetMeta,
    trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn new(meta: DatasetMeta, trajectories: Vec<Trajectory>) -> Result<Self> {
        validate_meta(&meta)?;
        if trajectories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, traj) in trajectories.iter().enumerate() {
            validate_trajectory(&meta, i, traj)?;
        }
        Ok(Self { meta, trajectories })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    /// Always false: datasets hold at least one trajectory.
    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn regime(&self) -> RewardRegime {
        self.meta.reward_regime
    }

    pub fn total_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(total_return).collect()
    }

    pub fn success_count(&self) -> Option<usize> {
        let mut n = 0;
        for t in &self.trajectories {
            n += usize::from(t.success?);
        }
        Some(n)
    }

    /// New dataset with the same metadata and the given trajectories.
    pub fn with_trajectories(&self, trajectories: Vec<Trajectory>) -> Result<Self> {
        Self::new(self.meta.clone(), trajectories)
    }
}

fn validate_meta(meta: &DatasetMeta) -> Result<()> {
    if meta.state_dim == 0 {
        return Err(Error::Dimension {
            what: "state dimension (must be >= 1)".into(),
            expected: 1,
            found: 0,
        });
    }
    if meta.action_dim == 0 {
        return Err(Error::Dimension {
            what: "action dimension (must be >= 1)".into(),
            expected: 1,
            found: 0,
        });
    }
    if meta.max_episode_length == 0 {
        return Err(Error::InvalidDataset("max_episode_length must be >= 1".into()));
    }
    Ok(())
}

fn validate_trajectory(meta: &DatasetMeta, i: usize, traj: &Trajectory) -> Result<()> {
    if traj.state_dim != meta.state_dim {
        return Err(Error::Dimension {
            what: format!("state dimension of trajectory {i}"),
            expected: meta.state_dim,
            found: traj.state_dim,
        });
    }
    if traj.action_dim != meta.action_dim {
        return Err(Error::Dimension {
            what: format!("action dimension of trajectory {i}"),
            expected: meta.action_dim,
            found: traj.action_dim,
        });
    }
    if traj.len() > meta.max_episode_length {
        return Err(Error::InvalidDataset(format!(
            "trajectory {i} has {} steps, more than max_episode_length {}",
            traj.len(),
            meta.max_episode_length
        )));
    }
    let last = traj.len() - 1;
    if meta.reward_regime != RewardRegime::Dense && traj.rewards[..last].iter().any(|&r| r != 0.0) {
        return Err(Error::InvalidDataset(format!(
            "trajectory {i}: {} data must have zero non-terminal rewards",
            meta.reward_regime
        )));
    }
    if meta.reward_regime == RewardRegime::Sparse {
        let fin = traj.rewards[last];
        if fin != 0.0 && fin != 1.0 {
            return Err(Error::InvalidDataset(format!(
                "trajectory {i}: sparse terminal reward must be 0 or 1, found {fin}"
            )));
        }
        if let Some(success) = traj.success {
            if success != (fin == 1.0) {
                return Err(Error::InvalidDataset(format!(
                    "trajectory {i}: success flag {success} disagrees with terminal reward {fin}"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn traj(rewards: &[f64]) -> Trajectory {
        let n = rewards.len();
        Trajectory::from_flat(1, 1, vec![0.0; n], vec![0.0; n], rewards.to_vec(), None).unwrap()
    }

    #[test]
    fn total_return_examples() {
        assert_eq!(total_return(&traj(&[1.0, 2.0, 3.0])), 6.0);
        assert_eq!(total_return(&traj(&[0.0, 0.0, 0.0])), 0.0);
        assert_eq!(total_return(&traj(&[0.5, -0.5, 2.25])), 2.25);
    }

    #[test]
    fn returns_to_go_examples() {
        assert_eq!(returns_to_go(&traj(&[0.0, 0.0, 1.0])), vec![1.0, 1.0, 1.0]);
        assert_eq!(returns_to_go(&traj(&[1.0, 2.0, 3.0])), vec![6.0, 5.0, 3.0]);
        assert_eq!(returns_to_go(&traj(&[5.0])), vec![5.0]);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(Trajectory::from_flat(1, 1, vec![], vec![], vec![], None).is_err());
        assert!(Trajectory::from_flat(1, 1, vec![f64::NAN], vec![0.0], vec![0.0], None).is_err());
        assert!(matches!(
            Trajectory::from_flat(1, 0, vec![0.0], vec![], vec![0.0], None),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn sparse_dataset_checks_labels() {
        let meta = DatasetMeta {
            env_name: "t".into(),
            state_dim: 1,
            action_dim: 1,
            max_episode_length: 10,
            reward_regime: RewardRegime::Sparse,
        };
        let bad = Trajectory::from_flat(1, 1, vec![0.0; 2], vec![0.0; 2], vec![0.0, 1.0], Some(false)).unwrap();
        assert!(TrajectoryDataset::new(meta.clone(), vec![bad]).is_err());
        let good = Trajectory::from_flat(1, 1, vec![0.0; 2], vec![0.0; 2], vec![0.0, 1.0], Some(true)).unwrap();
        assert!(TrajectoryDataset::new(meta, vec![good]).is_ok());
    }

    #[test]
    fn dataset_rejects_overlong_trajectories() {
        let meta = DatasetMeta {
            env_name: "t".into(),
            state_dim: 1,
            action_dim: 1,
            max_episode_length: 2,
            reward_regime: RewardRegime::Dense,
        };
        assert!(TrajectoryDataset::new(meta, vec![traj(&[1.0, 1.0, 1.0])]).is_err());
    }

    proptest! {
        #[test]
        fn rtg_recurrence_and_head(rewards in prop::collection::vec(-1e3f64..1e3, 1..60)) {
            let t = traj(&rewards);
            let rtg = returns_to_go(&t);
            prop_assert_eq!(rtg[0].to_bits(), total_return(&t).to_bits());
            for j in 0..rewards.len() - 1 {
                prop_assert_eq!(rtg[j].to_bits(), (rewards[j] + rtg[j + 1]).to_bits());
            }
            prop_assert_eq!(rtg[rewards.len() - 1], rewards[rewards.len() - 1]);
        }
    }
}
