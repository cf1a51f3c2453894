//! Numerically stable activations shared by the router and the commander head.

/// Largest `f64` below one.
pub const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, evaluated on the branch that never overflows `exp`.
/// The result stays strictly inside `(0, 1)`: saturated values are held at
/// [`f64::MIN_POSITIVE`] and [`SIGMOID_MAX`].
pub fn sigmoid(logit: f64) -> f64 {
    let p = if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

/// Softmax with max-logit subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 1 / (1 + e^-10) evaluated to 16 significant digits.
        assert!((sigmoid(10.0) - 0.999_954_602_131_297_6).abs() < 1e-15);
        assert!((sigmoid(-10.0) - 4.539_786_870_243_442e-5).abs() < 1e-18);
    }

    #[test]
    fn sigmoid_saturates_inside_open_interval() {
        assert_eq!(sigmoid(1000.0), SIGMOID_MAX);
        assert_eq!(sigmoid(-1000.0), f64::MIN_POSITIVE);
        assert!(sigmoid(40.0) < 1.0);
        assert!(sigmoid(-800.0) > 0.0);
    }

    #[test]
    fn softmax_reference_values() {
        let p = softmax(&[2.0, 0.0]);
        assert!((p[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((p[1] - 0.119_202_922_022_117_7).abs() < 1e-12);
        let big = softmax(&[1000.0, -1000.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
