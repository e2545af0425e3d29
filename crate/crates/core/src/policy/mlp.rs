use serde::{Deserialize, Serialize};

use super::{check_dim, fan_in_uniform, StateNorm};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// `depth` hidden ReLU layers of width `hidden`, then a linear head. With
/// `depth == 0` the policy is a single affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_depth() -> usize {
    2
}

fn default_hidden() -> usize {
    512
}

impl MlpConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            depth: default_depth(),
            hidden: default_hidden(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.state_dim == 0 {
            v.push("mlp state_dim must be at least 1".into());
        }
        if self.action_dim == 0 {
            v.push("mlp action_dim must be at least 1".into());
        }
        if self.depth > 0 && self.hidden == 0 {
            v.push("mlp hidden must be at least 1".into());
        }
        v
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.state_dim];
        w.extend(std::iter::repeat_n(self.hidden, self.depth));
        w.push(self.action_dim);
        w
    }

    /// Sum over layers of `fan_in * fan_out + fan_out`.
    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    config: MlpConfig,
    params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
    norm: StateNorm,
}

impl MlpPolicy {
    pub fn new(config: MlpConfig, rng: &mut StreamRng) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for (i, pair) in config.widths().windows(2).enumerate() {
            let w = params.add(format!("layer{i}.weight"), fan_in_uniform(rng, pair[0], pair[1]));
            let b = params.add(format!("layer{i}.bias"), Tensor::zeros(&[pair[1]]));
            layers.push((w, b));
        }
        let norm = StateNorm::identity(config.state_dim);
        Ok(Self {
            config,
            params,
            layers,
            norm,
        })
    }

    pub(crate) fn from_parts(config: MlpConfig, flat: &[f64], norm: StateNorm) -> Result<Self> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut p = Self::new(config, &mut rng)?;
        p.params.load_flat(flat)?;
        p.set_state_norm(norm)?;
        Ok(p)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn state_norm(&self) -> &StateNorm {
        &self.norm
    }

    pub fn set_state_norm(&mut self, norm: StateNorm) -> Result<()> {
        check_dim("state normalization", self.config.state_dim, norm.dim())?;
        self.norm = norm;
        Ok(())
    }

    /// Records the forward pass for a `[B, state_dim]` batch of raw states
    /// using the parameters in `store`, which must share this policy's
    /// layout.
    pub fn forward_with<'p>(&self, store: &'p ParamStore, g: &mut Graph<'p>, states: &Tensor) -> Result<Var> {
        if states.shape().len() != 2 {
            return Err(Error::shape("mlp input", states.shape(), &[0, self.config.state_dim]));
        }
        check_dim("mlp state", self.config.state_dim, states.shape()[1])?;
        let mut x = states.clone();
        self.norm.apply(x.data_mut());
        let mut h = g.constant(x);
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            h = g.matmul(h, wv)?;
            h = g.add_bias(h, bv)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, states: &Tensor) -> Result<Var> {
        self.forward_with(&self.params, g, states)
    }

    /// Actions for a `[B, state_dim]` batch.
    pub fn predict(&self, states: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, states)?;
        Ok(g.value(out).clone())
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp state", self.config.state_dim, state.len())?;
        let t = Tensor::matrix(1, state.len(), state.to_vec())?;
        Ok(self.predict(&t)?.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedPath;

    #[test]
    fn closed_form_counts() {
        let by_hand = 18 * 512 + 512 + 512 * 512 + 512 + 512 * 7 + 7;
        assert_eq!(by_hand, 275_975);
        assert_eq!(MlpConfig::new(18, 7).param_count(), by_hand);
        let linear = MlpConfig {
            state_dim: 2,
            action_dim: 1,
            depth: 0,
            hidden: 512,
        };
        assert_eq!(linear.param_count(), 3);
        let p = MlpPolicy::new(MlpConfig::new(18, 7), &mut SeedPath::new(0).rng()).unwrap();
        assert_eq!(p.param_count(), 275_975);
    }

    #[test]
    fn zero_weights_give_zero_action() {
        let mut p = MlpPolicy::new(MlpConfig::new(3, 2), &mut SeedPath::new(1).rng()).unwrap();
        for t in p.params_mut().tensors_mut() {
            t.data_mut().fill(0.0);
        }
        assert_eq!(p.act(&[0.3, -7.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_evaluated_one_by_one() {
        // relu(relu(2x + 1) * 3 - 1) * 0.5 + 0.25 at x = 0.5: h1 = 2, h2 = 5, y = 2.75
        let cfg = MlpConfig {
            state_dim: 1,
            action_dim: 1,
            depth: 2,
            hidden: 1,
        };
        let mut p = MlpPolicy::new(cfg, &mut SeedPath::new(0).rng()).unwrap();
        p.params_mut().load_flat(&[2.0, 1.0, 3.0, -1.0, 0.5, 0.25]).unwrap();
        assert_eq!(p.act(&[0.5]).unwrap(), vec![2.75]);
        // negative pre-activation is cut
        assert_eq!(p.act(&[-1.0]).unwrap(), vec![0.25]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let p = MlpPolicy::new(MlpConfig { hidden: 16, ..MlpConfig::new(4, 2) }, &mut SeedPath::new(2).rng()).unwrap();
        let base: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.5).collect();
        let a = p.predict(&Tensor::matrix(3, 4, base.clone()).unwrap()).unwrap();
        let mut changed = base.clone();
        changed[5] += 3.0;
        let b = p.predict(&Tensor::matrix(3, 4, changed).unwrap()).unwrap();
        assert_eq!(a.data()[..2], b.data()[..2]);
        assert_ne!(a.data()[2..4], b.data()[2..4]);
        assert_eq!(a.data()[4..], b.data()[4..]);
    }

    #[test]
    fn wrong_state_dim() {
        let p = MlpPolicy::new(MlpConfig::new(4, 2), &mut SeedPath::new(0).rng()).unwrap();
        assert!(matches!(p.act(&[1.0]), Err(Error::Dimension { .. })));
    }
}
