use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EnvKind, Environment, RewardMode};
use crate::dataset::{DatasetMeta, RewardRegime, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::rewards::label_sparse;
use crate::rng::{SeedPath, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    /// Analytic controller.
    Expert,
    /// Expert plus Gaussian action noise.
    Medium,
    /// Uniform actions in `[-1, 1]`.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub quality: Quality,
    /// Standard deviation of the Gaussian noise (medium quality only).
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub count: usize,
}

fn default_noise() -> f64 {
    0.5
}

/// Scripted-policy mixture to roll out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub mixture: Vec<MixtureEntry>,
}

impl GeneratorSpec {
    /// 60 expert, 120 medium (noise 0.5) and 120 random episodes.
    pub fn default_sparse() -> Self {
        Self {
            mixture: vec![
                MixtureEntry { quality: Quality::Expert, noise: 0.0, count: 60 },
                MixtureEntry { quality: Quality::Medium, noise: 0.5, count: 120 },
                MixtureEntry { quality: Quality::Random, noise: 0.0, count: 120 },
            ],
        }
    }

    pub fn total(&self) -> usize {
        self.mixture.iter().map(|m| m.count).sum()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.total() == 0 {
            v.push("generator mixture must contain at least one episode".into());
        }
        for m in &self.mixture {
            if !(m.noise.is_finite() && m.noise >= 0.0) {
                v.push(format!("mixture noise must be finite and non-negative, got {}", m.noise));
            }
        }
        v
    }

    /// Parses `quality[@noise]:count` items separated by commas, e.g.
    /// `expert:60,medium@0.5:120,random:120`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut mixture = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let bad = || Error::InvalidArgument(format!("bad mixture item {item:?} (expected quality[@noise]:count)"));
            let (head, count) = item.split_once(':').ok_or_else(bad)?;
            let count = count.trim().parse().map_err(|_| bad())?;
            let (quality, noise) = match head.split_once('@') {
                Some((q, n)) => (q, n.trim().parse().map_err(|_| bad())?),
                None => (head, default_noise()),
            };
            let quality = match quality.trim() {
                "expert" => Quality::Expert,
                "medium" => Quality::Medium,
                "random" => Quality::Random,
                _ => return Err(bad()),
            };
            mixture.push(MixtureEntry { quality, noise, count });
        }
        let spec = Self { mixture };
        let v = spec.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        Ok(spec)
    }
}

/// A scripted behavior policy of a given quality tier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedPolicy {
    pub kind: EnvKind,
    pub quality: Quality,
    pub noise: f64,
}

impl ScriptedPolicy {
    pub fn expert(kind: EnvKind) -> Self {
        Self { kind, quality: Quality::Expert, noise: 0.0 }
    }

    pub fn random(kind: EnvKind) -> Self {
        Self { kind, quality: Quality::Random, noise: 0.0 }
    }

    pub fn act(&self, state: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        match self.quality {
            Quality::Expert => self.kind.expert_action(state),
            Quality::Medium => {
                let mut a = self.kind.expert_action(state);
                if self.noise > 0.0 {
                    let n = Normal::new(0.0, self.noise).expect("valid noise scale");
                    for x in &mut a {
                        *x += n.sample(rng);
                    }
                }
                a
            }
            Quality::Random => {
                let d = match self.kind {
                    EnvKind::PointReach => 2,
                    EnvKind::ChainRun => 1,
                };
                (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect()
            }
        }
    }
}

/// Runs one episode of a scripted policy, recording the clamped actions the
/// environment actually applied.
pub fn rollout_scripted(
    env: &mut dyn Environment,
    policy: &ScriptedPolicy,
    reset_seed: u64,
    rng: &mut StreamRng,
) -> Result<Trajectory> {
    let mut state = env.reset(reset_seed);
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    loop {
        let action = super::clamp_action(&policy.act(&state, rng));
        let out = env.step(&action)?;
        states.extend_from_slice(&state);
        actions.extend_from_slice(&action);
        rewards.push(out.reward);
        state = out.state;
        if out.done {
            break;
        }
    }
    Trajectory::from_flat(env.state_dim(), env.action_dim(), states, actions, rewards, env.success())
}

/// Rolls out the mixture in order. Episode `i` resets from
/// `(seed, "generate", i)` and draws policy noise from
/// `(seed, "generate-noise", i)`.
pub fn generate_dataset(kind: EnvKind, mode: RewardMode, spec: &GeneratorSpec, seed: u64) -> Result<TrajectoryDataset> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let mut env = kind.make(mode)?;
    let root = SeedPath::new(seed);
    let mut trajectories = Vec::with_capacity(spec.total());
    let mut i = 0u64;
    for entry in &spec.mixture {
        let policy = ScriptedPolicy { kind, quality: entry.quality, noise: entry.noise };
        for _ in 0..entry.count {
            let reset = root.child("generate").index(i).seed_u64();
            let mut rng = root.child("generate-noise").index(i).rng();
            trajectories.push(rollout_scripted(env.as_mut(), &policy, reset, &mut rng)?);
            i += 1;
        }
    }
    let meta = DatasetMeta {
        env_name: kind.name().to_owned(),
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
        max_episode_length: env.horizon(),
        reward_regime: match mode {
            RewardMode::Sparse => RewardRegime::Sparse,
            RewardMode::Dense => RewardRegime::Dense,
        },
    };
    TrajectoryDataset::new(meta, trajectories)
}

/// Mean episode return of the scripted random and expert policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub random: f64,
    pub expert: f64,
}

pub fn reference_scores(kind: EnvKind, mode: RewardMode, episodes: usize, seed: u64) -> Result<ReferenceScores> {
    let mut env = kind.make(mode)?;
    let root = SeedPath::new(seed);
    let mut mean = |policy: ScriptedPolicy, label: &str| -> Result<f64> {
        let mut returns = Vec::with_capacity(episodes);
        for i in 0..episodes as u64 {
            let reset = root.child(label).index(i).seed_u64();
            let mut rng = root.child(label).child("noise").index(i).rng();
            returns.push(rollout_scripted(env.as_mut(), &policy, reset, &mut rng)?.total_return());
        }
        Ok(crate::eval::stats::mean(&returns))
    };
    Ok(ReferenceScores {
        random: mean(ScriptedPolicy::random(kind), "reference-random")?,
        expert: mean(ScriptedPolicy::expert(kind), "reference-expert")?,
    })
}

/// Synthetic sparse dataset with exactly `successes` of `n` trajectories
/// labeled successful, mimicking the shape of machine-generated
/// manipulation data. States and actions are Gaussian noise; episode
/// lengths are 2 to 8 steps.
pub fn mg_fixture(name: &str, n: usize, successes: usize, state_dim: usize, action_dim: usize, seed: u64) -> Result<TrajectoryDataset> {
    if successes > n {
        return Err(Error::InvalidArgument(format!("{successes} successes out of {n} trajectories")));
    }
    let mut rng = SeedPath::new(seed).child("mg-fixture").rng();
    let gauss = |k: usize, rng: &mut StreamRng| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(rng)).collect() };
    let trajectories = (0..n)
        .map(|_| {
            let len = rng.random_range(2..=8);
            let s = gauss(len * state_dim, &mut rng);
            let a = gauss(len * action_dim, &mut rng);
            Trajectory::from_flat(state_dim, action_dim, s, a, vec![0.0; len], None)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut flags = vec![false; n];
    for i in sample(&mut rng, n, successes) {
        flags[i] = true;
    }
    let meta = DatasetMeta {
        env_name: name.to_owned(),
        state_dim,
        action_dim,
        max_episode_length: 8,
        reward_regime: RewardRegime::Dense,
    };
    label_sparse(&TrajectoryDataset::new(meta, trajectories)?, &flags)
}

/// 1500 trajectories, 244 successful, 18-d states, 7-d actions.
pub fn lift_like_fixture(seed: u64) -> Result<TrajectoryDataset> {
    mg_fixture("lift-mg-like", 1500, 244, 18, 7, seed)
}

/// 3900 trajectories, 716 successful, 18-d states, 7-d actions.
pub fn can_like_fixture(seed: u64) -> Result<TrajectoryDataset> {
    mg_fixture("can-mg-like", 3900, 716, 18, 7, seed)
}
