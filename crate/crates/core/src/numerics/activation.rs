/// Odd, C¹ range compressor: identity on `[-1, 1]`, `±(ln|x| + 1)` outside.
#[inline]
pub fn linear_log(x: f32) -> f32 {
    if x > 1.0 {
        x.ln() + 1.0
    } else if x < -1.0 {
        -(-x).ln() - 1.0
    } else {
        x
    }
}

#[inline]
pub fn linear_log_grad(x: f32) -> f32 {
    let a = x.abs();
    if a > 1.0 {
        1.0 / a
    } else {
        1.0
    }
}

/// Logistic function, stable for large `|x|`. Saturates to exactly 0 or 1
/// once the true value is closer than `f32` resolution.
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Probability of the positive class from a two-logit softmax head.
#[inline]
pub fn softmax2_positive(neg_logit: f32, pos_logit: f32) -> f32 {
    sigmoid(pos_logit - neg_logit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_log_fixed_points() {
        assert_eq!(linear_log(0.0), 0.0);
        assert_eq!(linear_log(1.0), 1.0);
        assert_eq!(linear_log(-1.0), -1.0);
        let e = std::f32::consts::E;
        assert!((linear_log(e) - 2.0).abs() < 1e-6);
        assert!((linear_log(-e) + 2.0).abs() < 1e-6);
        // 1 + 30 ln 10 = 70.07755278982137
        assert!((linear_log(1e30) - 70.077_55).abs() < 1e-4);
    }

    #[test]
    fn linear_log_grad_values() {
        assert_eq!(linear_log_grad(0.0), 1.0);
        assert_eq!(linear_log_grad(1.0), 1.0);
        assert_eq!(linear_log_grad(-1.0), 1.0);
        let e = std::f32::consts::E;
        assert!((linear_log_grad(e) - 1.0 / e).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(40.0) as f64 >= 1.0 - 1e-15);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert!(sigmoid(1000.0) <= 1.0);
        for &x in &[0.1f32, 0.7, 2.5, 9.0, 15.0] {
            assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_head_matches_sigmoid_of_difference() {
        let (a, b) = (0.3f32, -1.2f32);
        let ea = (a as f64).exp();
        let eb = (b as f64).exp();
        let direct = eb / (ea + eb);
        assert!((softmax2_positive(a, b) as f64 - direct).abs() < 1e-7);
    }
}
