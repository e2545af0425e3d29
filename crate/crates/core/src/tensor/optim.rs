use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before and after clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm <= max_norm {
        return (norm, norm);
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= factor;
        }
    }
    (norm, global_norm(grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. The learning rate is passed per step
/// so schedules stay outside the optimizer.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.tensors().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = lr * weight_decay;
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w -= decay * *w;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr * min(1, (step + 1) / warmup_steps)`
    Warmup { lr: f64, warmup_steps: u64 },
    /// `lr`, multiplied by `factor` from epoch `milestone` on.
    StepDecay { lr: f64, milestone: usize, factor: f64 },
}

impl LrSchedule {
    /// Rate for optimizer step `step` (0-based) taken during `epoch` (0-based).
    pub fn lr(&self, step: u64, epoch: usize) -> f64 {
        match *self {
            Self::Constant { lr } => lr,
            Self::Warmup { lr, warmup_steps } => {
                let frac = (step + 1) as f64 / warmup_steps.max(1) as f64;
                lr * frac.min(1.0)
            }
            Self::StepDecay { lr, milestone, factor } => {
                if epoch >= milestone {
                    lr * factor
                } else {
                    lr
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::scalar(v));
        s
    }

    #[test]
    fn first_adam_step() {
        let mut store = store_with(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[Tensor::scalar(1.0)], 0.1).unwrap();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.tensors()[0].data()[0] - want).abs() < 1e-12);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_cases() {
        let mut store = store_with(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        opt.step(&mut store, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(store.tensors()[0].data()[0], 2.0);

        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() }, &store);
        opt.step(&mut store, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(store.tensors()[0].data()[0], 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut store = store_with(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        assert!(opt.step(&mut store, &[Tensor::vector(vec![1.0, 2.0])], 0.1).is_err());
        assert!(opt.step(&mut store, &[], 0.1).is_err());
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor::vector(vec![0.1])];
        clip_grad_norm(&mut g, 0.25);
        assert_eq!(g[0].data(), &[0.1]);

        let mut g = vec![Tensor::vector(vec![1.0])];
        clip_grad_norm(&mut g, 0.25);
        assert!((g[0].data()[0] - 0.25).abs() < 1e-12);

        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        let (pre, post) = clip_grad_norm(&mut g, 0.25);
        assert_eq!(pre, 5.0);
        assert!((post - 0.25).abs() < 1e-12);
        assert!((g[0].data()[0] - 0.15).abs() < 1e-12);
        assert!((g[1].data()[0] - 0.20).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        let w = LrSchedule::Warmup { lr: 1e-4, warmup_steps: 100_000 };
        assert!((w.lr(0, 0) - 1e-9).abs() < 1e-21);
        assert_eq!(w.lr(99_999, 0), 1e-4);
        assert_eq!(w.lr(500_000, 9), 1e-4);
        let d = LrSchedule::StepDecay { lr: 1e-4, milestone: 80, factor: 0.1 };
        assert_eq!(d.lr(0, 79), 1e-4);
        assert!((d.lr(0, 80) - 1e-5).abs() < 1e-18);
    }

    proptest::proptest! {
        #[test]
        fn clip_never_increases_norm(vals in proptest::collection::vec(-10.0f64..10.0, 1..20), max in 0.01f64..5.0) {
            let mut g = vec![Tensor::vector(vals.clone())];
            let (pre, post) = clip_grad_norm(&mut g, max);
            proptest::prop_assert!(post <= pre + 1e-15);
            proptest::prop_assert!(post <= max + 1e-12);
            if pre <= max {
                proptest::prop_assert_eq!(g[0].data(), &vals[..]);
            }
        }
    }
}
