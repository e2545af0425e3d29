//! Experiment configuration files (TOML).
//!
//! ```toml
//! name = "toy_sparse"
//! methods = ["bc", "fbc", "dt", "fdt"]
//! seeds = [0, 1, 2, 3, 4]
//!
//! [[datasets]]
//! name = "pointreach-mg"
//! env = "pointreach"
//! reward = "sparse"
//! mixture = [
//!     { quality = "expert", count = 60 },
//!     { quality = "medium", noise = 0.5, count = 120 },
//!     { quality = "random", count = 120 },
//! ]
//!
//! [train]
//! epochs = 100
//!
//! [train_dt]
//! lr = 1e-3
//! dt = { embed_dim = 32, context_len = 5 }
//!
//! [eval]
//! n_rollouts = 50
//! eval_every_epochs = 50
//! ```
//!
//! `[train]` applies to every method; `[train_mlp]` and `[train_dt]` then
//! override it for the MLP methods (bc, fbc) and transformer methods (dt,
//! fdt). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, RewardRegime, TrajectoryDataset};
use crate::env::{generate_dataset, EnvKind, GeneratorSpec, MixtureEntry, RewardMode};
use crate::error::{Error, Result};
use crate::eval::EvalSpec;
use crate::rewards::{sparsify, FilterSpec};
use crate::train::{DtShape, Method, MlpShape, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetReward {
    Sparse,
    Dense,
    /// Generated with dense rewards, then sparsified.
    Sparsified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub env: EnvKind,
    pub reward: DatasetReward,
    /// Scripted mixture to generate; exclusive with `path`.
    #[serde(default)]
    pub mixture: Option<Vec<MixtureEntry>>,
    #[serde(default)]
    pub generator_seed: u64,
    /// Existing `.traj` file, relative to the config file.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub random_ref: Option<f64>,
    #[serde(default)]
    pub expert_ref: Option<f64>,
    #[serde(default)]
    pub rtg_target: Option<f64>,
}

impl DatasetConfig {
    pub fn regime(&self) -> RewardRegime {
        match self.reward {
            DatasetReward::Sparse => RewardRegime::Sparse,
            DatasetReward::Dense => RewardRegime::Dense,
            DatasetReward::Sparsified => RewardRegime::Sparsified,
        }
    }

    pub fn env_mode(&self) -> RewardMode {
        match self.reward {
            DatasetReward::Sparse => RewardMode::Sparse,
            _ => RewardMode::Dense,
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let n = &self.name;
        if n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            v.push(format!("dataset name {n:?} must be non-empty and use only letters, digits, '-', '_' or '.'"));
        }
        match (&self.mixture, &self.path) {
            (Some(m), None) => {
                v.extend(GeneratorSpec { mixture: m.clone() }.violations().into_iter().map(|e| format!("dataset {n}: {e}")));
            }
            (None, Some(_)) => {}
            _ => v.push(format!("dataset {n}: give exactly one of `mixture` or `path`")),
        }
        if self.env == EnvKind::ChainRun && self.reward == DatasetReward::Sparse {
            v.push(format!("dataset {n}: chainrun has no sparse reward mode"));
        }
        v.extend(self.eval_spec(1).violations().into_iter().map(|e| format!("dataset {n}: {e}")));
        v
    }

    pub fn eval_spec(&self, n_rollouts: usize) -> EvalSpec {
        EvalSpec {
            env: self.env,
            reward: self.env_mode(),
            n_rollouts,
            random_ref: self.random_ref,
            expert_ref: self.expert_ref,
        }
    }

    /// Generates or loads the dataset. `base` resolves relative paths.
    pub fn materialize(&self, base: &Path) -> Result<TrajectoryDataset> {
        let ds = match (&self.mixture, &self.path) {
            (Some(m), None) => {
                let spec = GeneratorSpec { mixture: m.clone() };
                let ds = generate_dataset(self.env, self.env_mode(), &spec, self.generator_seed)?;
                if self.reward == DatasetReward::Sparsified {
                    sparsify(&ds)?
                } else {
                    ds
                }
            }
            (None, Some(p)) => load_dataset(base.join(p))?,
            _ => return Err(Error::Config(vec![format!("dataset {}: give exactly one of `mixture` or `path`", self.name)])),
        };
        if ds.regime() != self.regime() {
            return Err(Error::RegimeMismatch {
                expected: self.regime(),
                found: ds.regime(),
            });
        }
        if ds.meta().env_name != self.env.name() {
            return Err(Error::InvalidDataset(format!(
                "dataset {} was recorded on {:?}, config says {}",
                self.name,
                ds.meta().env_name,
                self.env.name()
            )));
        }
        Ok(ds)
    }
}

/// Optional training settings layered over the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: Option<f64>,
    /// Top-fraction filter size for non-sparse data.
    pub filter_fraction: Option<f64>,
    pub mlp: Option<MlpShape>,
    pub dt: Option<DtShape>,
}

impl TrainOverrides {
    /// Parses a standalone table of training settings (the `[train]` schema).
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim_end().to_owned()]))
    }

    pub fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = Some(v);
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.grad_clip {
            c.grad_clip = v;
        }
        if let Some(v) = self.warmup_steps {
            c.warmup_steps = v;
        }
        if let Some(v) = self.lr_decay_epoch {
            c.lr_decay_epoch = v;
        }
        if let Some(v) = self.lr_decay_factor {
            c.lr_decay_factor = v;
        }
        if let Some(v) = self.filter_fraction {
            c.filter = Some(FilterSpec {
                mode: crate::rewards::FilterMode::TopFraction,
                fraction: v,
            });
        }
        if let Some(v) = &self.mlp {
            c.mlp = v.clone();
        }
        if let Some(v) = &self.dt {
            c.dt = v.clone();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_rollouts: usize,
    pub eval_every_epochs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_rollouts: 50,
            eval_every_epochs: 50,
        }
    }
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub train_mlp: TrainOverrides,
    #[serde(default)]
    pub train_dt: TrainOverrides,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    /// Parses and fully validates a config.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim_end().to_owned()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.name.is_empty() {
            v.push("name must not be empty".into());
        }
        if self.methods.is_empty() {
            v.push("methods must list at least one method".into());
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        if m.len() != self.methods.len() {
            v.push("methods contains duplicates".into());
        }
        if self.seeds.is_empty() {
            v.push("seeds must list at least one seed".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            v.push("seeds contains duplicates".into());
        }
        if self.datasets.is_empty() {
            v.push("at least one [[datasets]] entry is required".into());
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            v.push("dataset names must be unique".into());
        }
        for d in &self.datasets {
            v.extend(d.violations());
        }
        if self.eval.n_rollouts == 0 {
            v.push("eval.n_rollouts must be at least 1".into());
        }
        if self.eval.eval_every_epochs == 0 {
            v.push("eval.eval_every_epochs must be at least 1".into());
        }
        for &method in &self.methods {
            for d in &self.datasets {
                let c = self.train_config(method, 0, d);
                for e in c.violations() {
                    let msg = format!("train ({method}): {e}");
                    if !v.contains(&msg) {
                        v.push(msg);
                    }
                }
            }
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

    /// Fully resolved training configuration of one arm.
    pub fn train_config(&self, method: Method, seed: u64, dataset: &DatasetConfig) -> TrainConfig {
        let mut c = TrainConfig::new(method, seed);
        c.eval_every_epochs = self.eval.eval_every_epochs;
        self.train.apply(&mut c);
        if method.is_transformer() {
            self.train_dt.apply(&mut c);
        } else {
            self.train_mlp.apply(&mut c);
        }
        if !method.is_filtered() {
            c.filter = None;
        } else if dataset.reward == DatasetReward::Sparse {
            c.filter = Some(FilterSpec::success());
        }
        c.rtg_target = dataset.rtg_target;
        c
    }

    /// Output directory: `OFFRL_OUTPUT_DIR` if set, else `output_dir`, else
    /// `runs/<name>`; relative paths resolve against `base`.
    pub fn output_dir(&self, base: &Path) -> PathBuf {
        if let Some(dir) = std::env::var_os("OFFRL_OUTPUT_DIR") {
            return PathBuf::from(dir);
        }
        match &self.output_dir {
            Some(d) => base.join(d),
            None => base.join("runs").join(&self.name),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
name = "t"
seeds = [1, 2]
[[datasets]]
name = "d"
env = "pointreach"
reward = "sparse"
mixture = [{ quality = "expert", count = 3 }]
[train]
epochs = 2
[train_dt]
lr = 0.01
dt = { embed_dim = 8, context_len = 2 }
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = ExperimentConfig::from_toml(GOOD).unwrap();
        assert_eq!(cfg.methods, Method::ALL.to_vec());
        let d = &cfg.datasets[0];
        let dt = cfg.train_config(Method::Fdt, 2, d);
        assert_eq!((dt.epochs, dt.lr, dt.seed), (2, 0.01, 2));
        assert_eq!(dt.dt.embed_dim, 8);
        assert_eq!(dt.filter, Some(FilterSpec::success()));
        let bc = cfg.train_config(Method::Bc, 2, d);
        assert_eq!((bc.lr, bc.filter), (1e-4, None));
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml(&GOOD.replace("epochs = 2", "epochs = 2\nepoch = 3")).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn every_violation_listed() {
        let bad = GOOD
            .replace("seeds = [1, 2]", "seeds = []\nmethods = []")
            .replace("env = \"pointreach\"", "env = \"chainrun\"")
            .replace("epochs = 2", "epochs = 0");
        let Err(Error::Config(v)) = ExperimentConfig::from_toml(&bad) else {
            panic!("expected config error")
        };
        assert!(v.len() >= 4, "{v:?}");
    }
}
