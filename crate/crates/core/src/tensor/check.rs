//! Central finite-difference gradient checking.

use rand::seq::index::sample;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::SeedPath;

/// Which coordinates of each parameter tensor to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// Up to this many coordinates per tensor, chosen from the given seed.
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub h: f64,
    /// Denominator floor for the relative error, so gradients that are zero
    /// up to rounding are compared absolutely.
    pub floor: f64,
    pub coverage: Coverage,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-6,
            floor: 1e-4,
            coverage: Coverage::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    /// Coordinates where the step straddled a kink (ReLU, max) and the
    /// analytic value was compared with the matching one-sided slope.
    pub kinks: usize,
}

/// One-sided slopes disagreeing by more than this mark a kink within `h`.
const KINK_SPLIT: f64 = 1e-3;

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn scalar_value(g: &Graph<'_>, v: Var) -> Result<f64> {
    g.value(v)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(g.shape(v).to_vec()))
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences `(f(p + h) - f(p - h)) / 2h`.
///
/// When the central difference disagrees and the forward and backward
/// slopes differ from each other, the function is not differentiable
/// inside `[p - h, p + h]`; the analytic value is then compared with the
/// closer one-sided slope and the coordinate is counted in `kinks`.
pub fn check_gradients<F>(store: &ParamStore, cfg: CheckConfig, f: F) -> Result<CheckReport>
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let analytic = g.backward(loss)?.params(store);
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let v = f(&mut g, s)?;
        scalar_value(&g, v)
    };

    let base = eval(store)?;
    let mut probe = store.clone();
    let mut report = CheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        kinks: 0,
    };
    for (ti, id) in store.ids().enumerate() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match cfg.coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sampled { per_tensor, seed } => {
                let mut rng = SeedPath::new(seed).child("gradcheck").index(ti as u64).rng();
                let mut c = sample(&mut rng, n, per_tensor.min(n)).into_vec();
                c.sort_unstable();
                c
            }
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + cfg.h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - cfg.h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let mut numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic[ti].data()[i];
            let mut err = relative_error(a, numeric, cfg.floor);
            let fwd = (plus - base) / cfg.h;
            let bwd = (base - minus) / cfg.h;
            if relative_error(fwd, bwd, cfg.floor) > KINK_SPLIT {
                let side = if relative_error(a, fwd, cfg.floor) <= relative_error(a, bwd, cfg.floor) {
                    fwd
                } else {
                    bwd
                };
                let side_err = relative_error(a, side, cfg.floor);
                if side_err < err {
                    numeric = side;
                    err = side_err;
                    report.kinks += 1;
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    param: store.names()[ti].clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = SeedPath::new(seed).rng();
        let mut t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut s = ParamStore::new();
        s.add("x", t(&[2, 3, 4]));
        s.add("w", t(&[4, 4]));
        s.add("b", t(&[4]));
        s.add("gamma", t(&[4]));
        s.add("beta", t(&[4]));
        s.add("table", t(&[5, 4]));
        s.add("unused", t(&[2]));
        s
    }

    // Touches every primitive once.
    fn composite<'p>(g: &mut Graph<'p>, s: &'p ParamStore) -> Result<Var> {
        let ids: Vec<_> = s.ids().collect();
        let x = g.param(s, ids[0]);
        let w = g.param(s, ids[1]);
        let b = g.param(s, ids[2]);
        let gamma = g.param(s, ids[3]);
        let beta = g.param(s, ids[4]);
        let table = g.param(s, ids[5]);

        let h = g.matmul(x, w)?;
        let h = g.add_bias(h, b)?;
        let h = g.layer_norm(h, gamma, beta, 1e-5)?;
        let h = g.tanh(h);
        let mut rng = SeedPath::new(9).rng();
        let h = g.dropout(h, 0.3, &mut rng)?;
        let emb = g.gather_rows(table, &[0, 2, 4, 2, 1, 0])?;
        let emb = g.reshape(emb, &[2, 3, 4])?;
        let h = g.add(h, emb)?;
        let scores = g.batch_matmul(h, h, true)?;
        let scores = g.scale(scores, 0.5);
        let keep: Vec<bool> = (0..18).map(|i| (i % 3) >= (i / 3) % 3).collect();
        let scores = g.mask_fill(scores, keep)?;
        let p = g.softmax(scores);
        let ctx = g.batch_matmul(p, h, false)?;
        let r = g.relu(ctx);
        let r = g.add_scalar(r, 0.1);
        let pr = g.permute(r, &[1, 0, 2])?;
        let pr = g.permute(pr, &[1, 0, 2])?;
        let st = g.stack(&[pr, h], 2)?;
        let sel = g.select(st, 2, 0)?;
        let other = g.select(st, 2, 1)?;
        let prod = g.mul(sel, other)?;
        let diff = g.sub(prod, x)?;
        let mean = g.mean(diff);
        let flat = g.reshape(prod, &[6, 4])?;
        let target = Tensor::full(&[6, 4], 0.2);
        let mse = g.masked_mse_loss(flat, &target, Some(&[true, false, true, true, false, true]))?;
        let t = g.transpose(w)?;
        let tw = g.sum(t);
        let tw = g.scale(tw, 0.01);
        let l = g.add(mse, mean)?;
        g.add(l, tw)
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..5 {
            let store = random_store(seed);
            let rep = check_gradients(&store, CheckConfig::default(), composite).unwrap();
            assert_eq!(rep.checked, store.num_scalars());
            assert!(rep.max_rel_error < 1e-5, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn sampled_coverage_limits_probes() {
        let store = random_store(0);
        let cfg = CheckConfig {
            coverage: Coverage::Sampled { per_tensor: 2, seed: 1 },
            ..CheckConfig::default()
        };
        let rep = check_gradients(&store, cfg, composite).unwrap();
        assert_eq!(rep.checked, 14);
    }

    #[test]
    fn detects_wrong_gradient() {
        // relative error of a deliberately wrong pair
        assert!(relative_error(1.0, 1.1, 1e-4) > 0.05);
        assert!((relative_error(0.0, 1e-12, 1e-4) - 1e-8).abs() < 1e-20);
    }

    #[test]
    fn step_across_relu_kink_uses_one_sided_slope() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![1], vec![3e-7]).unwrap());
        let rep = check_gradients(&store, CheckConfig::default(), |g, s| {
            let v = g.param(s, x);
            let r = g.relu(v);
            Ok(g.sum(r))
        })
        .unwrap();
        assert_eq!(rep.kinks, 1);
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");

        // away from the kink nothing is flagged
        store.get_mut(x).data_mut()[0] = 0.5;
        let rep = check_gradients(&store, CheckConfig::default(), |g, s| {
            let v = g.param(s, x);
            let r = g.relu(v);
            Ok(g.sum(r))
        })
        .unwrap();
        assert_eq!(rep.kinks, 0);
    }
}
