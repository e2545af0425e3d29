use crate::error::{Error, Result};

/// Interleaved sinusoidal encoding of an integer position:
/// `pe[2i] = sin(pos / 10000^(2i/dim))`, `pe[2i+1] = cos(...)`.
pub fn sinusoidal_pe(position: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal encoding needs a positive even dimension, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    fill_sinusoidal(position, &mut out);
    Ok(out)
}

pub(crate) fn fill_sinusoidal(position: usize, out: &mut [f64]) {
    let dim = out.len() as f64;
    let pos = position as f64;
    for (i, pair) in out.chunks_exact_mut(2).enumerate() {
        let freq = 10000f64.powf(2.0 * i as f64 / dim);
        let angle = pos / freq;
        pair[0] = angle.sin();
        pair[1] = angle.cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero() {
        let pe = sinusoidal_pe(0, 8).unwrap();
        for pair in pe.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn position_one_dim_four() {
        let pe = sinusoidal_pe(1, 4).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let rounded = [0.84147, 0.54030, 0.00999983, 0.99995];
        for (a, b) in pe.iter().zip(rounded) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(sinusoidal_pe(3, 5).is_err());
        assert!(sinusoidal_pe(3, 0).is_err());
    }

    #[test]
    fn unit_pairs_and_distinct_positions() {
        let mut seen = Vec::new();
        for pos in 0..1000 {
            let pe = sinusoidal_pe(pos, 16).unwrap();
            for pair in pe.chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
            }
            seen.push(pe);
        }
        for i in 0..seen.len() {
            for j in i + 1..seen.len() {
                assert_ne!(seen[i], seen[j]);
            }
        }
    }
}
