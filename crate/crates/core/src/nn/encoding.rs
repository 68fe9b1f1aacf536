use super::scalar::Scalar;
use super::tensor::Tensor;
use super::TensorError;

/// Timestamp encoding: component `2k` is `sin(t / 10000^(2k/d))`,
/// component `2k+1` is `cos` of the same angle.
pub fn sinusoidal_encode(t: usize, d: usize) -> Result<Vec<f64>, TensorError> {
    sinusoidal_encode_real(t as f64, d)
}

/// Same closed form for a real-valued time (used for the `t → 0` limit).
pub fn sinusoidal_encode_real(t: f64, d: usize) -> Result<Vec<f64>, TensorError> {
    if d == 0 || d % 2 != 0 {
        return Err(TensorError::Config(format!("sinusoidal dimension must be even and positive, got {d}")));
    }
    let mut out = vec![0.0; d];
    for k in 0..d / 2 {
        let angle = t / 10000f64.powf((2 * k) as f64 / d as f64);
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    Ok(out)
}

/// `[n, d]` table of encodings for timestamps `1..=n`.
pub fn timestamp_table<T: Scalar>(n: usize, d: usize) -> Result<Tensor<T>, TensorError> {
    let mut data = Vec::with_capacity(n * d);
    for t in 1..=n {
        data.extend(sinusoidal_encode(t, d)?.into_iter().map(T::from_f64));
    }
    Tensor::new(vec![n, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_limit_is_sin_zero_cos_one() {
        let e = sinusoidal_encode_real(0.0, 8).unwrap();
        for k in 0..4 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn consecutive_timestamps_differ() {
        let a = sinusoidal_encode(1, 16).unwrap();
        let b = sinusoidal_encode(2, 16).unwrap();
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn t3_d8_matches_scalar_closed_form() {
        let e = sinusoidal_encode(3, 8).unwrap();
        // frequencies 1, 10000^-0.25 = 0.1, 0.01, 0.001
        let expect = [
            3f64.sin(),
            3f64.cos(),
            0.3f64.sin(),
            0.3f64.cos(),
            0.03f64.sin(),
            0.03f64.cos(),
            0.003f64.sin(),
            0.003f64.cos(),
        ];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn odd_dimension_is_config_error() {
        assert!(matches!(sinusoidal_encode(1, 7), Err(TensorError::Config(_))));
    }
}
