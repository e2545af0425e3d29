//! Order-insensitive aggregation: values are sorted by `total_cmp` and then
//! summed pairwise, so any permutation of the inputs gives the same bits.

fn pairwise(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let (a, b) = sorted.split_at(n / 2);
            pairwise(a) + pairwise(b)
        }
    }
}

pub fn sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    pairwise(&v)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values) / values.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (sum(&sq) / values.len() as f64).sqrt()
}

/// Linear-interpolated quantile of `values`, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_cases() {
        assert_eq!(mean(&[1.0, 3.0]), 2.0);
        assert_eq!(std(&[1.0, 3.0]), 1.0);
        assert_eq!(std(&[4.0]), 0.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut v in prop::collection::vec(-1e6f64..1e6, 1..50), seed in any::<u64>()) {
            let a = (mean(&v).to_bits(), std(&v).to_bits());
            let n = v.len();
            v.rotate_left((seed as usize) % n);
            v.reverse();
            prop_assert_eq!(a, (mean(&v).to_bits(), std(&v).to_bits()));
        }
    }
}
