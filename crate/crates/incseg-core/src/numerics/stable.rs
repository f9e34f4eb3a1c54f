//! Overflow-safe elementary reductions for logit arithmetic.

use crate::error::{Error, Result};

/// `max(v) + log(sum(exp(v - max)))`, safe for magnitudes up to ~700.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax of `logits` restricted to `subset` indices, via the LSE shift.
/// Output is ordered like `subset` and sums to 1.
pub fn softmax_subset(logits: &[f64], subset: &[usize]) -> Result<Vec<f64>> {
    if subset.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let max = subset
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = subset.iter().map(|&i| (logits[i] - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Softmax over the full logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..logits.len()).collect();
    softmax_subset(logits, &all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn lse_uniform_case() {
        let v = log_sum_exp(&[0.0, 0.0, 0.0]).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lse_singleton_identity() {
        assert_eq!(log_sum_exp(&[5.0]).unwrap(), 5.0);
    }

    #[test]
    fn lse_shift_beats_naive_overflow() {
        // direct evaluation of max + ln(sum(exp(v-max))): 1000 + ln(2)
        let v = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
        assert!(v.is_finite());
    }

    #[test]
    fn lse_empty_is_error() {
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyReduction)));
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax_subset(&[0.0, 0.0, 0.0], &[0, 1, 2]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_prev_subset() {
        // softmax of [1,0] restricted to the first two entries of [1,0,2]
        let p = softmax_subset(&[1.0, 0.0, 2.0], &[0, 1]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn softmax_full_vs_subset_head() {
        let p = softmax_subset(&[1.0, 0.0, 2.0], &[0, 1, 2]).unwrap();
        assert!((p[0] - 0.244728).abs() < 1e-6);
    }

    #[test]
    fn softmax_empty_subset_is_error() {
        assert!(matches!(softmax_subset(&[1.0], &[]), Err(Error::EmptyReduction)));
    }

    // probability-vector property over random finite inputs
    #[test]
    fn softmax_is_probability_vector() {
        let mut rng = Rng::new(77);
        for _ in 0..300 {
            let n = 1 + rng.usize_below(12);
            let logits: Vec<f64> = (0..n).map(|_| rng.normal() * 50.0).collect();
            let subset: Vec<usize> = (0..n).collect();
            let p = softmax_subset(&logits, &subset).unwrap();
            assert!(p.iter().all(|&v| v >= 0.0));
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "sum={sum}");
        }
    }

    #[test]
    fn lse_dominates_max() {
        let mut rng = Rng::new(78);
        for _ in 0..300 {
            let n = 2 + rng.usize_below(10);
            let v: Vec<f64> = (0..n).map(|_| rng.normal() * 10.0).collect();
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = log_sum_exp(&v).unwrap();
            assert!(lse - max > 0.0, "LSE must strictly exceed max for length >= 2");
        }
    }
}
