//! Communication cost accounting.
//!
//! Per-token expected cost of trying peers before the cloud, the rule that
//! decides when trying peers pays off, and the exponential cache-hit curve.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("c_llm must be positive, got {0}")]
    LlmCost(f64),
    #[error("{0} must be non-negative and finite")]
    Negative(&'static str),
    #[error("p_hit window must be at least 1")]
    Window,
    #[error("p_hit prior must lie in [0, 1], got {0}")]
    Prior(f64),
}

/// Unit costs. Latency fields are carried for reporting only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub c_p2p: f64,
    pub c_llm: f64,
    pub c_uplink: f64,
    pub tau_slm: f64,
    pub tau_llm: f64,
    pub tau_uplink: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            c_p2p: 1.0,
            c_llm: 10.0,
            c_uplink: 0.0,
            tau_slm: 0.0,
            tau_llm: 0.0,
            tau_uplink: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.c_llm.is_finite() && self.c_llm > 0.0) {
            return Err(CostError::LlmCost(self.c_llm));
        }
        for (name, v) in [
            ("c_p2p", self.c_p2p),
            ("c_uplink", self.c_uplink),
            ("tau_slm", self.tau_slm),
            ("tau_llm", self.tau_llm),
            ("tau_uplink", self.tau_uplink),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CostError::Negative(name));
            }
        }
        Ok(())
    }

    /// Break-even hit probability `c_p2p / c_llm`.
    pub fn break_even(&self) -> f64 {
        self.c_p2p / self.c_llm
    }
}

/// `(1 − p)(c_p2p + c_llm) + p·c_p2p`, evaluated as `c_p2p + (1 − p)·c_llm`.
pub fn expected_cost(p_hit: f64, model: &CostModel) -> f64 {
    model.c_p2p + (1.0 - p_hit) * model.c_llm
}

/// Try peers first iff `p_hit ≥ c_p2p / c_llm`.
pub fn should_attempt_p2p(p_hit: f64, model: &CostModel) -> bool {
    p_hit >= model.break_even()
}

/// Expected per-token cost of the opportunistic policy.
pub fn opportunistic_cost(p_hit: f64, model: &CostModel) -> f64 {
    if should_attempt_p2p(p_hit, model) {
        expected_cost(p_hit, model)
    } else {
        model.c_llm
    }
}

/// `H(S) = 1 − e^{−αS}`.
pub fn cache_hit_curve(size: usize, alpha: f64) -> f64 {
    -(-alpha * size as f64).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheModel {
    pub alpha_fit: f64,
    pub size: usize,
}

impl CacheModel {
    pub fn hit_ratio(&self) -> f64 {
        cache_hit_curve(self.size, self.alpha_fit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheFit {
    pub alpha: f64,
    /// Coefficient of determination of the fitted curve on the raw ratios.
    pub r_squared: f64,
}

/// Least-squares fit of `H(S) = 1 − e^{−αS}` to measured `(S, H)` points.
///
/// The residual sum is minimized directly in `ln α`: a coarse log-spaced scan
/// brackets the minimum and golden-section search refines it. Returns `None`
/// without at least one point of positive size.
pub fn fit_cache_alpha(points: &[(usize, f64)]) -> Option<CacheFit> {
    let sizes = points.iter().filter(|p| p.0 > 0).map(|p| p.0 as f64);
    let (lo, hi) = sizes.fold((f64::INFINITY, 0.0f64), |(lo, hi), s| {
        (lo.min(s), hi.max(s))
    });
    if hi == 0.0 {
        return None;
    }
    let sse = |ln_alpha: f64| -> f64 {
        let alpha = ln_alpha.exp();
        points
            .iter()
            .map(|&(s, h)| (h - cache_hit_curve(s, alpha)).powi(2))
            .sum()
    };
    // α from "H reaches 1e-4 at the largest size" to "H is 1 − e^-50 at the smallest"
    let (a, b) = ((1e-4 / hi).ln(), (50.0 / lo).ln());
    const GRID: usize = 400;
    let step = (b - a) / GRID as f64;
    let best = (0..=GRID)
        .map(|i| a + step * i as f64)
        .min_by(|x, y| sse(*x).total_cmp(&sse(*y)))
        .expect("grid is non-empty");
    let (mut l, mut r) = (best - step, best + step);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let m1 = r - phi * (r - l);
        let m2 = l + phi * (r - l);
        if sse(m1) <= sse(m2) {
            r = m2;
        } else {
            l = m1;
        }
    }
    let alpha = (0.5 * (l + r)).exp();
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let ss_res = sse(alpha.ln());
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    Some(CacheFit { alpha, r_squared })
}

/// Sliding-window estimate of the peer/cache hit probability.
#[derive(Debug, Clone, PartialEq)]
pub struct HitEstimator {
    window: usize,
    prior: f64,
    history: VecDeque<bool>,
}

impl HitEstimator {
    pub fn new(window: usize, prior: f64) -> Result<Self, CostError> {
        if window == 0 {
            return Err(CostError::Window);
        }
        if !(0.0..=1.0).contains(&prior) {
            return Err(CostError::Prior(prior));
        }
        Ok(Self {
            window,
            prior,
            history: VecDeque::with_capacity(window),
        })
    }

    pub fn record(&mut self, resolved: bool) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(resolved);
    }

    pub fn estimate(&self) -> f64 {
        p_hit_estimate(self.history.iter().copied(), self.window, self.prior)
    }
}

/// Fraction of successes over the last `window` outcomes, or `prior` while
/// fewer than `window` outcomes exist.
pub fn p_hit_estimate<I>(history: I, window: usize, prior: f64) -> f64
where
    I: IntoIterator<Item = bool>,
    I::IntoIter: DoubleEndedIterator,
{
    let recent: Vec<bool> = history.into_iter().rev().take(window).collect();
    if recent.len() < window {
        return prior;
    }
    recent.iter().filter(|&&b| b).count() as f64 / window as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(c_p2p: f64, c_llm: f64) -> CostModel {
        CostModel {
            c_p2p,
            c_llm,
            ..CostModel::default()
        }
    }

    #[test]
    fn expected_cost_examples() {
        let m = model(1.0, 4.0);
        assert_eq!(expected_cost(1.0, &m), 1.0);
        assert_eq!(expected_cost(0.0, &m), 5.0);
        assert_eq!(expected_cost(0.5, &m), 3.0);
    }

    #[test]
    fn decision_examples() {
        let m = model(1.0, 4.0);
        assert!(should_attempt_p2p(0.3, &m));
        assert!(!should_attempt_p2p(0.2, &m));
        assert!(should_attempt_p2p(0.25, &m));
    }

    #[test]
    fn cache_curve_examples() {
        assert_eq!(cache_hit_curve(0, 0.3), 0.0);
        assert!((cache_hit_curve(1, 2f64.ln()) - 0.5).abs() < 1e-15);
        let mut prev = 0.0;
        for s in 0..2_000 {
            let h = cache_hit_curve(s, 0.01);
            assert!(h >= prev && h < 1.0);
            prev = h;
        }
    }

    #[test]
    fn fit_recovers_exact_curve() {
        let pts: Vec<(usize, f64)> = [8, 16, 32, 64]
            .iter()
            .map(|&s| (s, cache_hit_curve(s, 0.02)))
            .collect();
        let fit = fit_cache_alpha(&pts).unwrap();
        assert!((fit.alpha - 0.02).abs() < 1e-9);
        assert!(fit.r_squared > 0.999_999);
        assert!(fit_cache_alpha(&[(0, 0.0)]).is_none());
    }

    #[test]
    fn estimator_examples() {
        let seven: Vec<bool> = (0..10).map(|i| i < 7).collect();
        assert!((p_hit_estimate(seven, 10, 0.5) - 0.7).abs() < 1e-12);
        assert_eq!(p_hit_estimate(Vec::new(), 10, 0.5), 0.5);
        assert_eq!(p_hit_estimate(vec![false; 10], 10, 0.5), 0.0);

        let mut est = HitEstimator::new(3, 0.5).unwrap();
        est.record(true);
        est.record(true);
        assert_eq!(est.estimate(), 0.5);
        est.record(false);
        est.record(false);
        assert!((est.estimate() - 1.0 / 3.0).abs() < 1e-12);
        assert!(HitEstimator::new(0, 0.5).is_err());
    }

    #[test]
    fn validation() {
        assert!(CostModel::default().validate().is_ok());
        assert_eq!(model(1.0, 0.0).validate(), Err(CostError::LlmCost(0.0)));
        assert!(model(-1.0, 1.0).validate().is_err());
    }
}
