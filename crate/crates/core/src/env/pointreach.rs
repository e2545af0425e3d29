use super::{check_action, clamp_action, episode_over, unit, EnvKind, Environment, RewardMode, StepOutcome};
use crate::error::Result;
use crate::rng::SeedPath;

pub const SPEED: f64 = 0.05;
pub const GOAL_RADIUS: f64 = 0.1;
pub const HORIZON: usize = 50;

#[derive(Debug, Clone)]
pub struct PointReach {
    mode: RewardMode,
    pos: [f64; 2],
    goal: [f64; 2],
    t: usize,
    active: bool,
    success: Option<bool>,
}

impl PointReach {
    pub fn new(mode: RewardMode) -> Self {
        Self {
            mode,
            pos: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
            active: false,
            success: None,
        }
    }

    /// Starts an episode from an explicit start and goal (clamped to the
    /// arena).
    pub fn reset_to(&mut self, start: [f64; 2], goal: [f64; 2]) -> Vec<f64> {
        self.pos = start.map(|v| v.clamp(-1.0, 1.0));
        self.goal = goal.map(|v| v.clamp(-1.0, 1.0));
        self.t = 0;
        self.active = true;
        self.success = None;
        self.state()
    }

    fn state(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.goal[0], self.goal[1]]
    }

    fn distance(&self) -> f64 {
        (self.pos[0] - self.goal[0]).hypot(self.pos[1] - self.goal[1])
    }
}

pub(super) fn expert_action(state: &[f64]) -> Vec<f64> {
    vec![
        ((state[2] - state[0]) / SPEED).clamp(-1.0, 1.0),
        ((state[3] - state[1]) / SPEED).clamp(-1.0, 1.0),
    ]
}

impl Environment for PointReach {
    fn kind(&self) -> EnvKind {
        EnvKind::PointReach
    }

    fn reward_mode(&self) -> RewardMode {
        self.mode
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = SeedPath::new(seed).child("pointreach-reset").rng();
        let start = [unit(&mut rng), unit(&mut rng)];
        let goal = [unit(&mut rng), unit(&mut rng)];
        self.reset_to(start, goal)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if !self.active {
            return Err(episode_over());
        }
        check_action(self, action)?;
        let a = clamp_action(action);
        for i in 0..2 {
            self.pos[i] = (self.pos[i] + SPEED * a[i]).clamp(-1.0, 1.0);
        }
        self.t += 1;
        let dist = self.distance();
        let reached = dist < GOAL_RADIUS;
        let done = reached || self.t >= HORIZON;
        let reward = match self.mode {
            RewardMode::Dense => -dist,
            RewardMode::Sparse => {
                if done && reached {
                    1.0
                } else {
                    0.0
                }
            }
        };
        if done {
            self.active = false;
            self.success = Some(reached);
        }
        Ok(StepOutcome {
            state: self.state(),
            reward,
            done,
        })
    }

    fn success(&self) -> Option<bool> {
        self.success
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_at_goal_succeeds_with_null_action() {
        let mut env = PointReach::new(RewardMode::Sparse);
        env.reset_to([0.3, -0.2], [0.3, -0.2]);
        let out = env.step(&[0.0, 0.0]).unwrap();
        assert!(out.done);
        assert_eq!(out.reward, 1.0);
        assert_eq!(env.success(), Some(true));
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn step_before_reset_and_bad_dims() {
        let mut env = PointReach::new(RewardMode::Sparse);
        assert!(env.step(&[0.0, 0.0]).is_err());
        env.reset(0);
        assert!(env.step(&[0.0]).is_err());
    }

    #[test]
    fn actions_are_clamped_and_arena_bounded() {
        let mut env = PointReach::new(RewardMode::Dense);
        env.reset_to([0.99, 0.0], [-1.0, -1.0]);
        let out = env.step(&[5.0, -3.0]).unwrap();
        assert_eq!(out.state[0], 1.0);
        assert_eq!(out.state[1], -0.05);
        let d = (2.0f64).hypot(0.95);
        assert_eq!(out.reward, -d);
    }

    #[test]
    fn corner_to_corner_expert_within_horizon() {
        let mut env = PointReach::new(RewardMode::Sparse);
        let mut s = env.reset_to([-1.0, -1.0], [1.0, 1.0]);
        let mut steps = 0;
        loop {
            let out = env.step(&expert_action(&s)).unwrap();
            steps += 1;
            s = out.state;
            if out.done {
                assert_eq!(out.reward, 1.0);
                break;
            }
        }
        // 2 units per axis at 0.05 per step, stopping 0.1 early on the diagonal
        assert!(steps <= 40, "{steps}");
    }
}
