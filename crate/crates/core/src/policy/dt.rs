use serde::{Deserialize, Serialize};

use super::pe::fill_sinusoidal;
use super::{check_dim, truncated_normal, StateNorm};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// How timestep indices enter the token embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionEncoding {
    #[default]
    Sinusoidal,
    /// Trainable `[max_episode_length, embed_dim]` table.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    pub context_len: usize,
    #[serde(default = "defaults::max_episode_length")]
    pub max_episode_length: usize,
    #[serde(default = "defaults::rtg_scale")]
    pub rtg_scale: f64,
    #[serde(default)]
    pub position: PositionEncoding,
}

mod defaults {
    pub fn layers() -> usize {
        3
    }
    pub fn heads() -> usize {
        1
    }
    pub fn embed_dim() -> usize {
        128
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn max_episode_length() -> usize {
        1000
    }
    pub fn rtg_scale() -> f64 {
        1.0
    }
}

impl DtConfig {
    pub fn new(state_dim: usize, action_dim: usize, context_len: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            layers: defaults::layers(),
            heads: defaults::heads(),
            embed_dim: defaults::embed_dim(),
            dropout: defaults::dropout(),
            context_len,
            max_episode_length: defaults::max_episode_length(),
            rtg_scale: defaults::rtg_scale(),
            position: PositionEncoding::Sinusoidal,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.state_dim == 0 || self.action_dim == 0 {
            v.push("dt state_dim and action_dim must be at least 1".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            v.push(format!(
                "dt embed_dim ({}) must be a positive multiple of heads ({})",
                self.embed_dim, self.heads
            ));
        }
        if self.position == PositionEncoding::Sinusoidal && self.embed_dim % 2 != 0 {
            v.push(format!("dt embed_dim ({}) must be even for sinusoidal encoding", self.embed_dim));
        }
        if self.context_len == 0 {
            v.push("dt context_len must be at least 1".into());
        }
        if self.context_len > self.max_episode_length {
            v.push(format!(
                "dt context_len ({}) exceeds max_episode_length ({})",
                self.context_len, self.max_episode_length
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dt dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            v.push(format!("dt rtg_scale ({}) must be positive", self.rtg_scale));
        }
        v
    }

    /// Closed form: three modality embeddings `E (d_s + d_a + 1) + 3E`,
    /// per block `12 E^2 + 13 E` (two layer norms, four attention
    /// projections, a `4E` feed-forward), final layer norm `2E`, head
    /// `E d_a + d_a`, plus `T E` for a learned timestep table.
    pub fn param_count(&self) -> usize {
        let e = self.embed_dim;
        let embed = e * (self.state_dim + self.action_dim + 1) + 3 * e;
        let block = 12 * e * e + 13 * e;
        let table = match self.position {
            PositionEncoding::Sinusoidal => 0,
            PositionEncoding::Learned => self.max_episode_length * e,
        };
        embed + self.layers * block + 2 * e + e * self.action_dim + self.action_dim + table
    }
}

/// A batch of context windows, row-major `[batch, len, ...]`. Rows flagged
/// invalid are left padding: they are masked out as attention keys and
/// carry no prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DtBatch {
    pub batch: usize,
    pub len: usize,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
}

impl DtBatch {
    /// All-padding batch to be filled in.
    pub fn zeros(batch: usize, len: usize, state_dim: usize, action_dim: usize) -> Self {
        let n = batch * len;
        Self {
            batch,
            len,
            rtg: vec![0.0; n],
            states: vec![0.0; n * state_dim],
            actions: vec![0.0; n * action_dim],
            timesteps: vec![0; n],
            valid: vec![false; n],
        }
    }

    fn check(&self, cfg: &DtConfig) -> Result<()> {
        if self.len == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("empty context batch".into()));
        }
        if self.len > cfg.context_len {
            return Err(Error::InvalidArgument(format!(
                "context window of {} steps exceeds context_len {}",
                self.len, cfg.context_len
            )));
        }
        let n = self.batch * self.len;
        check_dim("dt rtg entries", n, self.rtg.len())?;
        check_dim("dt state entries", n * cfg.state_dim, self.states.len())?;
        check_dim("dt action entries", n * cfg.action_dim, self.actions.len())?;
        check_dim("dt timesteps", n, self.timesteps.len())?;
        check_dim("dt validity flags", n, self.valid.len())?;
        if let Some(&t) = self.timesteps.iter().find(|&&t| t >= cfg.max_episode_length) {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside max_episode_length {}",
                cfg.max_episode_length
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    rtg: (ParamId, ParamId),
    state: (ParamId, ParamId),
    action: (ParamId, ParamId),
    timestep: Option<ParamId>,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

/// Causal transformer over interleaved (return-to-go, state, action) tokens,
/// predicting actions from state tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DtPolicy {
    config: DtConfig,
    params: ParamStore,
    layout: Layout,
    norm: StateNorm,
}

impl DtPolicy {
    pub fn new(config: DtConfig, rng: &mut StreamRng) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let e = config.embed_dim;
        let mut p = ParamStore::new();
        let linear = |p: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut StreamRng| {
            let w = p.add(format!("{name}.weight"), truncated_normal(rng, &[i, o], INIT_STD));
            let b = p.add(format!("{name}.bias"), Tensor::zeros(&[o]));
            (w, b)
        };
        let ln = |p: &mut ParamStore, name: &str| {
            let g = p.add(format!("{name}.gain"), Tensor::full(&[e], 1.0));
            let b = p.add(format!("{name}.shift"), Tensor::zeros(&[e]));
            (g, b)
        };
        let rtg = linear(&mut p, "embed_rtg", 1, e, rng);
        let state = linear(&mut p, "embed_state", config.state_dim, e, rng);
        let action = linear(&mut p, "embed_action", config.action_dim, e, rng);
        let timestep = match config.position {
            PositionEncoding::Sinusoidal => None,
            PositionEncoding::Learned => Some(p.add(
                "embed_timestep",
                truncated_normal(rng, &[config.max_episode_length, e], INIT_STD),
            )),
        };
        let blocks = (0..config.layers)
            .map(|l| Block {
                ln1: ln(&mut p, &format!("block{l}.ln1")),
                q: linear(&mut p, &format!("block{l}.query"), e, e, rng),
                k: linear(&mut p, &format!("block{l}.key"), e, e, rng),
                v: linear(&mut p, &format!("block{l}.value"), e, e, rng),
                o: linear(&mut p, &format!("block{l}.out"), e, e, rng),
                ln2: ln(&mut p, &format!("block{l}.ln2")),
                ff1: linear(&mut p, &format!("block{l}.ff1"), e, 4 * e, rng),
                ff2: linear(&mut p, &format!("block{l}.ff2"), 4 * e, e, rng),
            })
            .collect();
        let ln_f = ln(&mut p, "ln_final");
        let head = linear(&mut p, "action_head", e, config.action_dim, rng);
        let norm = StateNorm::identity(config.state_dim);
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                rtg,
                state,
                action,
                timestep,
                blocks,
                ln_f,
                head,
            },
            norm,
        })
    }

    pub(crate) fn from_parts(config: DtConfig, flat: &[f64], norm: StateNorm) -> Result<Self> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut p = Self::new(config, &mut rng)?;
        p.params.load_flat(flat)?;
        p.set_state_norm(norm)?;
        Ok(p)
    }

    pub fn config(&self) -> &DtConfig {
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

    /// Sets the action head to zero, so every prediction is exactly zero.
    pub fn zero_head(&mut self) {
        let (w, b) = self.layout.head;
        self.params.get_mut(w).data_mut().fill(0.0);
        self.params.get_mut(b).data_mut().fill(0.0);
    }

    /// Records the forward pass and returns predicted actions
    /// `[batch, len, action_dim]`, one per state token. Dropout is applied
    /// only when `dropout_rng` is given.
    pub fn forward_with<'p>(
        &self,
        store: &'p ParamStore,
        g: &mut Graph<'p>,
        batch: &DtBatch,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        batch.check(cfg)?;
        let (b, l, e) = (batch.batch, batch.len, cfg.embed_dim);
        let t = 3 * l;
        let p_drop = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };
        let mut drop = |g: &mut Graph<'p>, x: Var| -> Result<Var> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if p_drop > 0.0 => g.dropout(x, p_drop, rng),
                _ => Ok(x),
            }
        };
        let lin = |g: &mut Graph<'p>, x: Var, (w, bias): (ParamId, ParamId)| -> Result<Var> {
            let w = g.param(store, w);
            let bias = g.param(store, bias);
            let y = g.matmul(x, w)?;
            g.add_bias(y, bias)
        };
        let norm = |g: &mut Graph<'p>, x: Var, (gain, shift): (ParamId, ParamId)| -> Result<Var> {
            let gain = g.param(store, gain);
            let shift = g.param(store, shift);
            g.layer_norm(x, gain, shift, LN_EPS)
        };

        let rtg = Tensor::new(vec![b, l, 1], batch.rtg.iter().map(|r| r / cfg.rtg_scale).collect())?;
        let mut states = batch.states.clone();
        self.norm.apply(&mut states);
        let states = Tensor::new(vec![b, l, cfg.state_dim], states)?;
        let actions = Tensor::new(vec![b, l, cfg.action_dim], batch.actions.clone())?;

        let pos = match self.layout.timestep {
            None => {
                let mut data = vec![0.0; b * l * e];
                for (row, &ts) in data.chunks_exact_mut(e).zip(&batch.timesteps) {
                    fill_sinusoidal(ts, row);
                }
                g.constant(Tensor::new(vec![b, l, e], data)?)
            }
            Some(table) => {
                let table = g.param(store, table);
                let rows = g.gather_rows(table, &batch.timesteps)?;
                g.reshape(rows, &[b, l, e])?
            }
        };

        let mut tokens = Vec::with_capacity(3);
        for (input, ids) in [(rtg, self.layout.rtg), (states, self.layout.state), (actions, self.layout.action)] {
            let x = g.constant(input);
            let x = lin(g, x, ids)?;
            tokens.push(g.add(x, pos)?);
        }
        let x = g.stack(&tokens, 2)?;
        let x = g.reshape(x, &[b, t, e])?;
        let mut x = drop(g, x)?;

        let heads = cfg.heads;
        let dh = e / heads;
        let keep = attention_keep(b, l, heads, &batch.valid);
        let scale = 1.0 / (dh as f64).sqrt();
        let split = |g: &mut Graph<'p>, y: Var| -> Result<Var> {
            if heads == 1 {
                return Ok(y);
            }
            let y = g.reshape(y, &[b, t, heads, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[b * heads, t, dh])
        };

        for blk in &self.layout.blocks {
            let h = norm(g, x, blk.ln1)?;
            let q = lin(g, h, blk.q)?;
            let k = lin(g, h, blk.k)?;
            let v = lin(g, h, blk.v)?;
            let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let scores = g.batch_matmul(q, k, true)?;
            let scores = g.scale(scores, scale);
            let scores = g.mask_fill(scores, keep.clone())?;
            let probs = g.softmax(scores);
            let probs = drop(g, probs)?;
            let mut ctx = g.batch_matmul(probs, v, false)?;
            if heads > 1 {
                ctx = g.reshape(ctx, &[b, heads, t, dh])?;
                ctx = g.permute(ctx, &[0, 2, 1, 3])?;
                ctx = g.reshape(ctx, &[b, t, e])?;
            }
            let out = lin(g, ctx, blk.o)?;
            let out = drop(g, out)?;
            x = g.add(x, out)?;

            let h = norm(g, x, blk.ln2)?;
            let f = lin(g, h, blk.ff1)?;
            let f = g.relu(f);
            let f = lin(g, f, blk.ff2)?;
            let f = drop(g, f)?;
            x = g.add(x, f)?;
        }
        let x = norm(g, x, self.layout.ln_f)?;
        let x = g.reshape(x, &[b, l, 3, e])?;
        let s = g.select(x, 2, 1)?;
        lin(g, s, self.layout.head)
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, batch: &DtBatch, dropout_rng: Option<&mut StreamRng>) -> Result<Var> {
        self.forward_with(&self.params, g, batch, dropout_rng)
    }

    /// Predictions `[batch, len, action_dim]` without dropout.
    pub fn predict(&self, batch: &DtBatch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, batch, None)?;
        Ok(g.value(out).clone())
    }

    /// Action for the newest state of a single unpadded window. `actions`
    /// holds one entry per step; the newest one is a placeholder the
    /// prediction cannot see.
    pub fn predict_last(&self, rtg: &[f64], states: &[f64], actions: &[f64], timesteps: &[usize]) -> Result<Vec<f64>> {
        let len = rtg.len();
        let batch = DtBatch {
            batch: 1,
            len,
            rtg: rtg.to_vec(),
            states: states.to_vec(),
            actions: actions.to_vec(),
            timesteps: timesteps.to_vec(),
            valid: vec![true; len],
        };
        let out = self.predict(&batch)?;
        let d = self.config.action_dim;
        Ok(out.data()[(len - 1) * d..].to_vec())
    }
}

/// Attention keep-mask `[batch * heads, 3L, 3L]`: query token `i` sees key
/// `j` when `j <= i` and the key's timestep is real. Every token sees
/// itself, so padded queries stay finite.
fn attention_keep(batch: usize, len: usize, heads: usize, valid: &[bool]) -> Vec<bool> {
    let t = 3 * len;
    let mut keep = Vec::with_capacity(batch * heads * t * t);
    for bi in 0..batch {
        let mut one = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                one[i * t + j] = i == j || valid[bi * len + j / 3];
            }
        }
        for _ in 0..heads {
            keep.extend_from_slice(&one);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedPath;
    use rand::Rng;

    fn small(heads: usize, position: PositionEncoding) -> DtConfig {
        DtConfig {
            layers: 2,
            heads,
            embed_dim: 8,
            dropout: 0.1,
            max_episode_length: 50,
            rtg_scale: 2.0,
            position,
            ..DtConfig::new(3, 2, 4)
        }
    }

    fn random_batch(cfg: &DtConfig, b: usize, l: usize, seed: u64) -> DtBatch {
        let mut rng = SeedPath::new(seed).rng();
        let mut batch = DtBatch::zeros(b, l, cfg.state_dim, cfg.action_dim);
        for x in batch.rtg.iter_mut().chain(&mut batch.states).chain(&mut batch.actions) {
            *x = rng.random_range(-1.0..1.0);
        }
        for bi in 0..b {
            let start = rng.random_range(0..20);
            for j in 0..l {
                batch.timesteps[bi * l + j] = start + j;
            }
        }
        batch.valid.fill(true);
        batch
    }

    #[test]
    fn table_three_count() {
        let cfg = DtConfig::new(18, 7, 1);
        assert_eq!(cfg.param_count(), 599_687);
        let built = DtPolicy::new(cfg.clone(), &mut SeedPath::new(0).rng()).unwrap();
        assert_eq!(built.param_count(), cfg.param_count());
        let learned = DtConfig {
            position: PositionEncoding::Learned,
            ..small(2, PositionEncoding::Learned)
        };
        let built = DtPolicy::new(learned.clone(), &mut SeedPath::new(0).rng()).unwrap();
        assert_eq!(built.param_count(), learned.param_count());
    }

    #[test]
    fn config_problems_are_all_listed() {
        let bad = DtConfig {
            heads: 3,
            embed_dim: 8,
            dropout: 1.5,
            context_len: 0,
            ..DtConfig::new(3, 2, 4)
        };
        assert_eq!(bad.validate().len(), 3);
    }

    #[test]
    fn zero_head_predicts_zero() {
        let cfg = small(1, PositionEncoding::Sinusoidal);
        let mut p = DtPolicy::new(cfg.clone(), &mut SeedPath::new(4).rng()).unwrap();
        p.zero_head();
        let out = p.predict(&random_batch(&cfg, 2, 4, 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn future_tokens_do_not_leak() {
        for heads in [1, 2] {
            let cfg = small(heads, PositionEncoding::Sinusoidal);
            let p = DtPolicy::new(cfg.clone(), &mut SeedPath::new(5).rng()).unwrap();
            let base = random_batch(&cfg, 1, 4, 2);
            let before = p.predict(&base).unwrap();
            let mut changed = base.clone();
            // perturb step 2's return, state and action, and step 1's action
            changed.rtg[2] += 1.0;
            changed.states[2 * 3] -= 0.7;
            changed.actions[2 * 2 + 1] += 0.4;
            changed.actions[1 * 2] += 0.9;
            let after = p.predict(&changed).unwrap();
            assert_eq!(before.data()[..4], after.data()[..4]);
            assert_ne!(before.data()[4..6], after.data()[4..6]);
        }
    }

    #[test]
    fn left_padding_is_invisible() {
        let cfg = small(2, PositionEncoding::Learned);
        let p = DtPolicy::new(cfg.clone(), &mut SeedPath::new(6).rng()).unwrap();
        let short = random_batch(&cfg, 1, 2, 3);
        let mut padded = DtBatch::zeros(1, 4, 3, 2);
        padded.rtg[2..].copy_from_slice(&short.rtg);
        padded.states[6..].copy_from_slice(&short.states);
        padded.actions[4..].copy_from_slice(&short.actions);
        padded.timesteps[2..].copy_from_slice(&short.timesteps);
        padded.valid[2..].fill(true);
        let a = p.predict(&short).unwrap();
        let b = p.predict(&padded).unwrap();
        assert_eq!(a.data(), &b.data()[4..]);
        // garbage in padded slots changes nothing
        padded.states[0] = 40.0;
        padded.rtg[1] = -3.0;
        let c = p.predict(&padded).unwrap();
        assert_eq!(b.data()[4..], c.data()[4..]);
    }

    #[test]
    fn window_longer_than_context_rejected() {
        let cfg = small(1, PositionEncoding::Sinusoidal);
        let p = DtPolicy::new(cfg.clone(), &mut SeedPath::new(0).rng()).unwrap();
        let err = p.predict(&random_batch(&cfg, 1, 5, 0)).unwrap_err();
        assert!(err.to_string().contains("exceeds context_len"), "{err}");
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let cfg = small(1, PositionEncoding::Sinusoidal);
        let p = DtPolicy::new(cfg.clone(), &mut SeedPath::new(8).rng()).unwrap();
        let batch = random_batch(&cfg, 2, 4, 4);
        let eval = p.predict(&batch).unwrap();
        let mut rng = SeedPath::new(1).rng();
        let mut g = Graph::inference();
        let out = p.forward(&mut g, &batch, Some(&mut rng)).unwrap();
        assert_ne!(g.value(out).data(), eval.data());
    }
}
