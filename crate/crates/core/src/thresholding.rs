//! Unified threshold estimation from a mini-batch's non-target logits.
//!
//! The pool is every `cos θ_j` with `j != y_i` across the batch. For a target
//! overall FPR `γ`, the threshold is the `ceil(γ · pool)`-th largest pool
//! value, so at most that many non-target logits sit strictly above it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LogitsBatch;
use crate::numerics::select_kth_largest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub t_u: f64,
    /// 1-based order statistic index.
    pub k: usize,
    pub pool_size: usize,
    pub gamma_u: f64,
    /// Fraction of the pool strictly above `t_u`.
    pub realized_fpr: f64,
}

impl ThresholdEstimate {
    /// A threshold not tied to any pool, e.g. for injecting a fixed `T_u`.
    pub fn fixed(t_u: f64, gamma_u: f64) -> Self {
        Self {
            t_u,
            k: 1,
            pool_size: 1,
            gamma_u,
            realized_fpr: 0.0,
        }
    }
}

/// Order-statistic index `ceil(gamma · pool)` clamped to `[1, pool]`.
pub fn order_statistic_index(gamma_u: f64, pool_size: usize) -> usize {
    // Shave a few ulps so products like 0.07 * 100 = 7.000000000000001 do
    // not ceil to the next integer.
    let raw = gamma_u * pool_size as f64;
    let k = (raw * (1.0 - 4.0 * f64::EPSILON)).ceil();
    (k as usize).clamp(1, pool_size.max(1))
}

/// Threshold from an arbitrary pool of negative similarities.
pub fn estimate_from_pool(mut pool: Vec<f64>, gamma_u: f64) -> Result<ThresholdEstimate> {
    if !(gamma_u > 0.0 && gamma_u < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma_u must lie in (0, 1), got {gamma_u}")));
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument("threshold pool is empty".into()));
    }
    let pool_size = pool.len();
    let k = order_statistic_index(gamma_u, pool_size);
    let t_u = select_kth_largest(&mut pool, k)?;
    let above = pool.iter().filter(|&&v| v > t_u).count();
    Ok(ThresholdEstimate {
        t_u,
        k,
        pool_size,
        gamma_u,
        realized_fpr: above as f64 / pool_size as f64,
    })
}

/// Non-target logits of the batch in row-major order.
pub fn non_target_pool(batch: &LogitsBatch) -> Vec<f64> {
    let c = batch.cosines.cols();
    let mut pool = Vec::with_capacity(batch.labels.len() * c.saturating_sub(1));
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = batch.cosines.row(i);
        pool.extend(row.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| *v));
    }
    pool
}

pub fn estimate_threshold(batch: &LogitsBatch, gamma_u: f64) -> Result<ThresholdEstimate> {
    estimate_from_pool(non_target_pool(batch), gamma_u)
}

/// Exponential moving average of thresholds; `momentum = 0` returns the
/// current estimate unchanged.
pub fn smoothed_threshold(previous: Option<f64>, current: &ThresholdEstimate, momentum: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("threshold momentum must lie in [0, 1), got {momentum}")));
    }
    Ok(match previous {
        Some(prev) if momentum > 0.0 => momentum * prev + (1.0 - momentum) * current.t_u,
        _ => current.t_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Rng};
    use proptest::prelude::*;

    fn sorted_desc(pool: &[f64]) -> Vec<f64> {
        let mut s = pool.to_vec();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }

    #[test]
    fn ten_value_pool() {
        let pool: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).rev().collect();
        let est = estimate_from_pool(pool, 0.2).unwrap();
        assert_eq!(est.k, 2);
        assert_eq!(est.t_u, 0.8);
        assert_eq!(est.realized_fpr, 0.1);
    }

    #[test]
    fn tiny_gamma_clamps_to_max() {
        let pool = vec![0.3, -0.2, 0.7, 0.1];
        let est = estimate_from_pool(pool, 1e-6).unwrap();
        assert_eq!(est.k, 1);
        assert_eq!(est.t_u, 0.7);
        assert_eq!(est.realized_fpr, 0.0);
    }

    #[test]
    fn pools_from_batch_skip_targets() {
        let batch = LogitsBatch::new(
            Matrix::from_rows(&[[0.9, 0.1, 0.2], [0.3, 0.8, 0.4]]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        assert_eq!(non_target_pool(&batch), vec![0.1, 0.2, 0.3, 0.4]);
        let est = estimate_threshold(&batch, 0.5).unwrap();
        assert_eq!((est.k, est.t_u, est.pool_size), (2, 0.3, 4));
    }

    #[test]
    fn errors() {
        assert!(estimate_from_pool(vec![], 0.1).is_err());
        assert!(estimate_from_pool(vec![0.1], 0.0).is_err());
        assert!(estimate_from_pool(vec![0.1], 1.0).is_err());
        let single = LogitsBatch::new(Matrix::from_rows(&[[0.5]]).unwrap(), vec![0]).unwrap();
        assert!(estimate_threshold(&single, 0.1).is_err());
    }

    #[test]
    fn index_is_robust_to_float_noise() {
        assert_eq!(order_statistic_index(0.07, 100), 7);
        assert_eq!(order_statistic_index(0.2, 10), 2);
        assert_eq!(order_statistic_index(0.21, 10), 3);
        assert_eq!(order_statistic_index(1e-9, 10), 1);
    }

    #[test]
    fn smoothing() {
        let cur = ThresholdEstimate::fixed(0.6, 0.1);
        assert_eq!(smoothed_threshold(Some(0.4), &cur, 0.0).unwrap(), 0.6);
        assert!((smoothed_threshold(Some(0.4), &cur, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(smoothed_threshold(None, &cur, 0.9).unwrap(), 0.6);
        assert!(smoothed_threshold(None, &cur, 1.0).is_err());

        // geometric convergence: |t_n - c| = 0.9^n |t_0 - c|
        let c = ThresholdEstimate::fixed(0.35, 0.1);
        let mut t = Some(0.0);
        for _ in 0..200 {
            t = Some(smoothed_threshold(t, &c, 0.9).unwrap());
        }
        assert!((t.unwrap() - 0.35).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(seed in any::<u64>(), len in 1usize..3000, gamma in 1e-5f64..0.99) {
            let mut rng = Rng::new(seed);
            let pool: Vec<f64> = (0..len).map(|_| rng.uniform() * 2.0 - 1.0).collect();
            let est = estimate_from_pool(pool.clone(), gamma).unwrap();
            let sorted = sorted_desc(&pool);
            prop_assert_eq!(est.t_u, sorted[est.k - 1]);
            prop_assert!(est.realized_fpr <= gamma + 1.0 / len as f64);
            // distinct values: exactly k - 1 lie above
            prop_assert_eq!(est.realized_fpr, (est.k - 1) as f64 / len as f64);
        }

        #[test]
        fn threshold_is_monotone_in_gamma(seed in any::<u64>(), g1 in 1e-4f64..0.5, g2 in 1e-4f64..0.5) {
            let mut rng = Rng::new(seed);
            let pool: Vec<f64> = (0..500).map(|_| rng.normal()).collect();
            let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
            let t_lo = estimate_from_pool(pool.clone(), lo).unwrap().t_u;
            let t_hi = estimate_from_pool(pool, hi).unwrap().t_u;
            prop_assert!(t_lo >= t_hi);
        }
    }
}
