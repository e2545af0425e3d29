//! Reward-regime constructions and trajectory filters.
//!
//! `sparsify` moves each trajectory's total return onto its terminal step;
//! `label_sparse` writes binary terminal rewards from success labels. The two
//! filters keep either the successful trajectories (sparse data) or the ones
//! whose final reward ranks in the top fraction of the dataset (sparsified
//! data). All functions return new datasets; inputs are never modified.

use serde::{Deserialize, Serialize};

use crate::dataset::{total_return, RewardRegime, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};

pub const DEFAULT_TOP_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Success,
    TopFraction,
}

/// Which trajectories a filtered method keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub mode: FilterMode,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

fn default_fraction() -> f64 {
    DEFAULT_TOP_FRACTION
}

impl FilterSpec {
    pub fn success() -> Self {
        Self {
            mode: FilterMode::Success,
            fraction: DEFAULT_TOP_FRACTION,
        }
    }

    pub fn top_fraction(fraction: f64) -> Result<Self> {
        let spec = Self {
            mode: FilterMode::TopFraction,
            fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "filter fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }

    /// Filter suited to a dataset's reward regime: successes for sparse
    /// data, the top fraction for everything else.
    pub fn for_regime(regime: RewardRegime, fraction: f64) -> Self {
        match regime {
            RewardRegime::Sparse => Self {
                mode: FilterMode::Success,
                fraction,
            },
            _ => Self {
                mode: FilterMode::TopFraction,
                fraction,
            },
        }
    }
}

fn require_regime(ds: &TrajectoryDataset, expected: RewardRegime) -> Result<()> {
    if ds.regime() != expected {
        return Err(Error::RegimeMismatch {
            expected,
            found: ds.regime(),
        });
    }
    Ok(())
}

/// Zeroes every non-terminal reward and puts the trajectory's total return on
/// the final step.
pub fn sparsify(ds: &TrajectoryDataset) -> Result<TrajectoryDataset> {
    require_regime(ds, RewardRegime::Dense)?;
    let trajectories = ds
        .trajectories()
        .iter()
        .map(relocate_return)
        .collect::<Result<Vec<_>>>()?;
    let mut meta = ds.meta().clone();
    meta.reward_regime = RewardRegime::Sparsified;
    TrajectoryDataset::new(meta, trajectories)
}

/// The per-trajectory relocation behind [`sparsify`].
pub fn relocate_return(traj: &Trajectory) -> Result<Trajectory> {
    let mut rewards = vec![0.0; traj.len()];
    rewards[traj.len() - 1] = total_return(traj);
    traj.with_rewards(rewards, traj.success())
}

/// Rewrites rewards into binary terminal form from one success flag per
/// trajectory.
pub fn label_sparse(ds: &TrajectoryDataset, success_flags: &[bool]) -> Result<TrajectoryDataset> {
    if success_flags.len() != ds.len() {
        return Err(Error::Dimension {
            what: "success flags".into(),
            expected: ds.len(),
            found: success_flags.len(),
        });
    }
    let trajectories = ds
        .trajectories()
        .iter()
        .zip(success_flags)
        .map(|(traj, &ok)| {
            let mut rewards = vec![0.0; traj.len()];
            rewards[traj.len() - 1] = if ok { 1.0 } else { 0.0 };
            traj.with_rewards(rewards, Some(ok))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = ds.meta().clone();
    meta.reward_regime = RewardRegime::Sparse;
    TrajectoryDataset::new(meta, trajectories)
}

/// Keeps the successful trajectories of a sparse dataset, in order.
pub fn filter_successful(ds: &TrajectoryDataset) -> Result<TrajectoryDataset> {
    require_regime(ds, RewardRegime::Sparse)?;
    let mut kept = Vec::new();
    for (i, traj) in ds.trajectories().iter().enumerate() {
        match traj.success() {
            None => return Err(Error::MissingSuccessFlags(i)),
            Some(true) => kept.push(traj.clone()),
            Some(false) => {}
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyFilter(format!(
            "none of the {} trajectories is successful",
            ds.len()
        )));
    }
    ds.with_trajectories(kept)
}

/// Number of trajectories kept by a top-fraction filter: `ceil(fraction * n)`.
pub fn top_fraction_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(usize::from(n > 0), n)
}

/// Indices (ascending) of the `ceil(fraction * n)` trajectories with the
/// largest final reward. Equal rewards rank by original index.
pub fn top_fraction_indices(final_rewards: &[f64], fraction: f64) -> Vec<usize> {
    let k = top_fraction_count(final_rewards.len(), fraction);
    let mut order: Vec<usize> = (0..final_rewards.len()).collect();
    order.sort_by(|&a, &b| {
        final_rewards[b]
            .total_cmp(&final_rewards[a])
            .then(a.cmp(&b))
    });
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Keeps trajectories whose final reward lies in the top fraction of the
/// dataset's final rewards.
pub fn filter_top_fraction(ds: &TrajectoryDataset, spec: &FilterSpec) -> Result<TrajectoryDataset> {
    require_regime(ds, RewardRegime::Sparsified)?;
    spec.validate()?;
    let finals: Vec<f64> = ds.trajectories().iter().map(Trajectory::final_reward).collect();
    let kept = top_fraction_indices(&finals, spec.fraction)
        .into_iter()
        .map(|i| ds.trajectories()[i].clone())
        .collect();
    ds.with_trajectories(kept)
}

/// Dispatches on the filter mode.
pub fn apply_filter(ds: &TrajectoryDataset, spec: &FilterSpec) -> Result<TrajectoryDataset> {
    match spec.mode {
        FilterMode::Success => filter_successful(ds),
        FilterMode::TopFraction => filter_top_fraction(ds, spec),
    }
}
