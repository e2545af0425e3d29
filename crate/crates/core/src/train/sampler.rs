use rand::Rng;

use crate::dataset::TrajectoryDataset;
use crate::policy::DtBatch;
use crate::rng::StreamRng;

/// Uniform sampling of (state, action) pairs with replacement.
pub struct TransitionSampler<'a> {
    ds: &'a TrajectoryDataset,
    starts: Vec<usize>,
    total: usize,
}

fn cumulative_starts(ds: &TrajectoryDataset) -> (Vec<usize>, usize) {
    let mut starts = Vec::with_capacity(ds.len());
    let mut total = 0;
    for t in ds.trajectories() {
        starts.push(total);
        total += t.len();
    }
    (starts, total)
}

fn locate(starts: &[usize], global: usize) -> (usize, usize) {
    let traj = starts.partition_point(|&s| s <= global) - 1;
    (traj, global - starts[traj])
}

impl<'a> TransitionSampler<'a> {
    pub fn new(ds: &'a TrajectoryDataset) -> Self {
        let (starts, total) = cumulative_starts(ds);
        Self { ds, starts, total }
    }

    /// Fills `states` and `actions` (whole rows) with random transitions.
    pub fn fill(&self, rng: &mut StreamRng, states: &mut [f64], actions: &mut [f64]) {
        let (ds, da) = (self.ds.meta().state_dim, self.ds.meta().action_dim);
        for (s, a) in states.chunks_exact_mut(ds).zip(actions.chunks_exact_mut(da)) {
            let (i, t) = locate(&self.starts, rng.random_range(0..self.total));
            let traj = &self.ds.trajectories()[i];
            s.copy_from_slice(traj.state(t));
            a.copy_from_slice(traj.action(t));
        }
    }
}

/// Context windows ending at a uniformly drawn transition, which weights
/// trajectories by length. Windows reaching before the episode start are
/// left-padded with zeros and flagged invalid.
pub struct WindowSampler<'a> {
    ds: &'a TrajectoryDataset,
    starts: Vec<usize>,
    total: usize,
    rtg: Vec<Vec<f64>>,
    k: usize,
}

impl<'a> WindowSampler<'a> {
    pub fn new(ds: &'a TrajectoryDataset, k: usize) -> Self {
        let (starts, total) = cumulative_starts(ds);
        let rtg = ds.trajectories().iter().map(|t| t.returns_to_go()).collect();
        Self { ds, starts, total, rtg, k }
    }

    /// Writes the window of trajectory `traj` ending at step `end` into row
    /// `row` of `batch`.
    pub fn write_window(&self, batch: &mut DtBatch, row: usize, traj: usize, end: usize) {
        let (d, da, k) = (self.ds.meta().state_dim, self.ds.meta().action_dim, self.k);
        let tr = &self.ds.trajectories()[traj];
        for j in 0..k {
            let slot = row * k + j;
            let states = &mut batch.states[slot * d..(slot + 1) * d];
            let actions = &mut batch.actions[slot * da..(slot + 1) * da];
            match (end + j + 1).checked_sub(k) {
                Some(t) => {
                    batch.rtg[slot] = self.rtg[traj][t];
                    states.copy_from_slice(tr.state(t));
                    actions.copy_from_slice(tr.action(t));
                    batch.timesteps[slot] = t;
                    batch.valid[slot] = true;
                }
                None => {
                    batch.rtg[slot] = 0.0;
                    states.fill(0.0);
                    actions.fill(0.0);
                    batch.timesteps[slot] = 0;
                    batch.valid[slot] = false;
                }
            }
        }
    }

    pub fn fill(&self, rng: &mut StreamRng, batch: &mut DtBatch) {
        debug_assert_eq!(batch.len, self.k);
        for row in 0..batch.batch {
            let (i, t) = locate(&self.starts, rng.random_range(0..self.total));
            self.write_window(batch, row, i, t);
        }
    }
}
