//! Policy networks: a feed-forward MLP for behavior cloning and a causal
//! transformer over (return-to-go, state, action) tokens.

mod checkpoint;
mod dt;
mod mlp;
mod pe;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{ParamStore, Tensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use dt::{DtBatch, DtConfig, DtPolicy, PositionEncoding};
pub use mlp::{MlpConfig, MlpPolicy};
pub use pe::sinusoidal_pe;

/// Per-dimension state standardization fitted on training data. Not
/// trainable; stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StateNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation of `states` (rows of `dim`).
    /// Dimensions with standard deviation below 1e-6 are left unscaled.
    pub fn fit<'a>(dim: usize, states: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for s in states {
            n += 1;
            for j in 0..dim {
                sum[j] += s[j];
                sq[j] += s[j] * s[j];
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / nf - m * m).max(0.0).sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes consecutive rows of `data` in place.
    pub fn apply(&self, data: &mut [f64]) {
        let d = self.dim();
        for row in data.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
    }
}

/// Either architecture, for code paths that handle both.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Mlp(MlpPolicy),
    Dt(DtPolicy),
}

impl Policy {
    pub fn params(&self) -> &ParamStore {
        match self {
            Policy::Mlp(p) => p.params(),
            Policy::Dt(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Policy::Mlp(p) => p.params_mut(),
            Policy::Dt(p) => p.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().num_scalars()
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Policy::Mlp(p) => p.config().state_dim,
            Policy::Dt(p) => p.config().state_dim,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Policy::Mlp(p) => p.config().action_dim,
            Policy::Dt(p) => p.config().action_dim,
        }
    }

    pub fn state_norm(&self) -> &StateNorm {
        match self {
            Policy::Mlp(p) => p.state_norm(),
            Policy::Dt(p) => p.state_norm(),
        }
    }

    pub fn config(&self) -> PolicyConfig {
        match self {
            Policy::Mlp(p) => PolicyConfig::Mlp(p.config().clone()),
            Policy::Dt(p) => PolicyConfig::Dt(p.config().clone()),
        }
    }
}

/// Architecture description, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum PolicyConfig {
    Mlp(MlpConfig),
    Dt(DtConfig),
}

impl PolicyConfig {
    /// Builds a freshly initialized policy.
    pub fn build(&self, rng: &mut StreamRng) -> Result<Policy> {
        Ok(match self {
            PolicyConfig::Mlp(c) => Policy::Mlp(MlpPolicy::new(c.clone(), rng)?),
            PolicyConfig::Dt(c) => Policy::Dt(DtPolicy::new(c.clone(), rng)?),
        })
    }

    /// Trainable scalar count from the closed-form formula of each
    /// architecture, without building anything.
    pub fn param_count(&self) -> usize {
        match self {
            PolicyConfig::Mlp(c) => c.param_count(),
            PolicyConfig::Dt(c) => c.param_count(),
        }
    }
}

fn truncated_normal(rng: &mut StreamRng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn fan_in_uniform(rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

fn check_dim(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            what: what.to_owned(),
            expected,
            found,
        });
    }
    Ok(())
}

#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::rng::SeedPath;
    use crate::tensor::check::{check_gradients, CheckConfig};
    use crate::tensor::Graph;
    use rand::Rng;

    #[test]
    fn mlp_loss_gradients() {
        for seed in 0..5 {
            let cfg = MlpConfig { hidden: 6, ..MlpConfig::new(4, 2) };
            assert!(cfg.param_count() <= 200);
            let mut rng = SeedPath::new(seed).rng();
            let policy = MlpPolicy::new(cfg, &mut rng).unwrap();
            let states = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let target = Tensor::matrix(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let rep = check_gradients(policy.params(), CheckConfig::default(), |g: &mut Graph<'_>, s| {
                let out = policy.forward_with(s, g, &states)?;
                g.mse_loss(out, &target)
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-5, "{rep:?}");
        }
    }

    #[test]
    fn dt_loss_gradients() {
        for (seed, heads, position) in [
            (0, 1, PositionEncoding::Sinusoidal),
            (1, 2, PositionEncoding::Sinusoidal),
            (2, 1, PositionEncoding::Learned),
            (3, 2, PositionEncoding::Learned),
            (4, 1, PositionEncoding::Sinusoidal),
        ] {
            let cfg = DtConfig {
                layers: 1,
                heads,
                embed_dim: 2,
                max_episode_length: 8,
                rtg_scale: 3.0,
                position,
                ..DtConfig::new(2, 1, 3)
            };
            assert!(cfg.param_count() <= 200);
            let mut rng = SeedPath::new(seed).rng();
            let policy = DtPolicy::new(cfg, &mut rng).unwrap();
            let mut batch = DtBatch::zeros(2, 3, 2, 1);
            for x in batch.rtg.iter_mut().chain(&mut batch.states).chain(&mut batch.actions) {
                *x = rng.random_range(-1.0..1.0);
            }
            batch.timesteps = vec![0, 0, 1, 2, 3, 4];
            batch.valid = vec![false, true, true, true, true, true];
            let target = Tensor::new(vec![2, 3, 1], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let rep = check_gradients(policy.params(), CheckConfig::default(), |g: &mut Graph<'_>, s| {
                let mut drop = SeedPath::new(99).rng();
                let out = policy.forward_with(s, g, &batch, Some(&mut drop))?;
                g.masked_mse_loss(out, &target, Some(&batch.valid))
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-5, "seed {seed}: {rep:?}");
        }
    }
}
