use super::{check_action, clamp_action, episode_over, EnvKind, Environment, RewardMode, StepOutcome};
use crate::error::Result;
use crate::rng::SeedPath;

pub const HORIZON: usize = 100;
pub const DAMPING: f64 = 0.9;
pub const GAIN: f64 = 0.1;

#[derive(Debug, Clone, Default)]
pub struct ChainRun {
    x: f64,
    v: f64,
    t: usize,
    active: bool,
}

impl ChainRun {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts an episode at rest at position `x`.
    pub fn reset_to(&mut self, x: f64) -> Vec<f64> {
        self.x = x;
        self.v = 0.0;
        self.t = 0;
        self.active = true;
        vec![self.x, self.v]
    }
}

impl Environment for ChainRun {
    fn kind(&self) -> EnvKind {
        EnvKind::ChainRun
    }

    fn reward_mode(&self) -> RewardMode {
        RewardMode::Dense
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = SeedPath::new(seed).child("chainrun-reset").rng();
        self.reset_to(rng.random_range(-0.1..=0.1))
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if !self.active {
            return Err(episode_over());
        }
        check_action(self, action)?;
        let a = clamp_action(action)[0];
        self.v = DAMPING * self.v + GAIN * a;
        self.x += self.v;
        self.t += 1;
        let done = self.t >= HORIZON;
        if done {
            self.active = false;
        }
        Ok(StepOutcome {
            state: vec![self.x, self.v],
            reward: self.v,
            done,
        })
    }

    fn success(&self) -> Option<bool> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(action: f64) -> f64 {
        let mut env = ChainRun::new();
        env.reset(3);
        let mut total = 0.0;
        loop {
            let out = env.step(&[action]).unwrap();
            total += out.reward;
            if out.done {
                return total;
            }
        }
    }

    #[test]
    fn idle_from_rest_earns_nothing() {
        assert_eq!(run(0.0), 0.0);
    }

    #[test]
    fn full_throttle_matches_closed_form() {
        // v_t = 1 - 0.9^t, so the return is 100 - 9 (1 - 0.9^100)
        let closed = 100.0 - 9.0 * (1.0 - 0.9f64.powi(100));
        assert!((run(1.0) - closed).abs() < 1e-9);
        assert!((run(7.0) - closed).abs() < 1e-9);
    }
}
