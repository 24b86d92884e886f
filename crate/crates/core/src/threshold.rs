//! Per-client transmission threshold learning.
//!
//! Each transmitted token that the cloud adjudicates yields a rejection
//! probability. The local loss weights `(1 - β)² + λ` by the soft routing
//! decision, and the threshold follows plain SGD on that loss with a
//! `η0 / (1 + r)` schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_source::{TokenDistribution, TokenId, PROB_FLOOR};
use crate::uncertainty::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("gamma must be positive, got {0}")]
    Gamma(f64),
    #[error("lambda must be non-negative, got {0}")]
    Lambda(f64),
    #[error("eta0 must be positive, got {0}")]
    Eta(f64),
}

/// Feedback for one LLM-adjudicated token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionFeedback {
    pub beta: f64,
    pub token: TokenId,
    /// Uncertainty at the time the token was transmitted.
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub eta0: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            lambda: 0.01,
            eta0: 0.05,
            clamp_min: 0.0,
            clamp_max: 1.0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(LearnerError::Gamma(self.gamma));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LearnerError::Lambda(self.lambda));
        }
        if !(self.eta0.is_finite() && self.eta0 > 0.0) {
            return Err(LearnerError::Eta(self.eta0));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub round_updated: u32,
}

impl Threshold {
    pub fn new(value: f64) -> Self {
        Self {
            value: value.clamp(0.0, 1.0),
            round_updated: 0,
        }
    }
}

/// What a client accumulated in one round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    /// Every non-local outcome, including peer and edge resolutions.
    pub transmitted_count: u64,
    /// Only tokens the LLM adjudicated carry a rejection probability.
    pub feedback: Vec<RejectionFeedback>,
}

/// `max(1 − llm[token] / slm[token], 0)`, denominator floored at 1e-12.
pub fn rejection_probability(
    slm: &TokenDistribution,
    llm: &TokenDistribution,
    token: TokenId,
) -> f64 {
    let denom = slm.prob(token).max(PROB_FLOOR);
    (1.0 - llm.prob(token) / denom).clamp(0.0, 1.0)
}

fn penalty(beta: f64, lambda: f64) -> f64 {
    (1.0 - beta).powi(2) + lambda
}

pub fn local_loss(records: &[RejectionFeedback], u_th: f64, cfg: &LearnerConfig) -> f64 {
    records
        .iter()
        .map(|r| sigmoid(cfg.gamma * (r.uncertainty - u_th)) * penalty(r.beta, cfg.lambda))
        .sum()
}

/// Analytic derivative of [`local_loss`] with respect to `u_th`.
pub fn loss_gradient(records: &[RejectionFeedback], u_th: f64, cfg: &LearnerConfig) -> f64 {
    let sum: f64 = records
        .iter()
        .map(|r| {
            let s = sigmoid(cfg.gamma * (r.uncertainty - u_th));
            s * (1.0 - s) * penalty(r.beta, cfg.lambda)
        })
        .sum();
    -cfg.gamma * sum
}

pub fn sgd_step(th: Threshold, grad: f64, eta: f64) -> Threshold {
    Threshold {
        value: (th.value - eta * grad).clamp(0.0, 1.0),
        round_updated: th.round_updated + 1,
    }
}

/// Same as [`sgd_step`] but clamped to the configured bounds.
pub fn sgd_step_with(th: Threshold, grad: f64, eta: f64, cfg: &LearnerConfig) -> Threshold {
    let mut next = sgd_step(th, grad, eta);
    next.value = next.value.clamp(cfg.clamp_min, cfg.clamp_max);
    next
}

pub fn lr_schedule(eta0: f64, round: u32) -> f64 {
    eta0 / (1.0 + f64::from(round))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: f64, beta: f64) -> RejectionFeedback {
        RejectionFeedback {
            beta,
            token: 0,
            uncertainty: u,
        }
    }

    fn pair(slm_p: f64, llm_p: f64) -> (TokenDistribution, TokenDistribution) {
        (
            TokenDistribution::new(vec![slm_p, 1.0 - slm_p]).unwrap(),
            TokenDistribution::new(vec![llm_p, 1.0 - llm_p]).unwrap(),
        )
    }

    #[test]
    fn rejection_examples() {
        let (s, l) = pair(0.5, 0.25);
        assert!((rejection_probability(&s, &l, 0) - 0.5).abs() < 1e-12);
        let (s, l) = pair(0.3, 0.6);
        assert_eq!(rejection_probability(&s, &l, 0), 0.0);
        let (s, l) = pair(0.8, 0.1);
        assert!((rejection_probability(&s, &l, 0) - 0.875).abs() < 1e-12);
        let (s, l) = pair(1.0, 0.0);
        assert_eq!(rejection_probability(&s, &l, 1), 0.0);
        assert_eq!(rejection_probability(&s, &l, 0), 1.0);
    }

    #[test]
    fn loss_examples() {
        let cfg = LearnerConfig {
            lambda: 0.0,
            ..LearnerConfig::default()
        };
        assert!((local_loss(&[rec(0.5, 0.2)], 0.5, &cfg) - 0.32).abs() < 1e-12);
        assert_eq!(local_loss(&[], 0.5, &cfg), 0.0);
        let cfg = LearnerConfig::default();
        let saturated = local_loss(&[rec(1.0, 0.2)], 0.0, &cfg);
        assert!((saturated - 0.65).abs() < 1e-3, "{saturated}");
    }

    #[test]
    fn gradient_examples() {
        let cfg = LearnerConfig {
            lambda: 0.0,
            gamma: 10.0,
            ..LearnerConfig::default()
        };
        assert!((loss_gradient(&[rec(0.5, 0.2)], 0.5, &cfg) + 1.6).abs() < 1e-12);
        assert_eq!(loss_gradient(&[], 0.3, &cfg), 0.0);
    }

    #[test]
    fn sgd_examples() {
        let th = Threshold::new(0.5);
        let next = sgd_step(th, -1.6, 0.01);
        assert!((next.value - 0.516).abs() < 1e-12);
        assert_eq!(next.round_updated, 1);
        assert_eq!(sgd_step(Threshold::new(0.99), -5.0, 0.01).value, 1.0);
        assert_eq!(sgd_step(th, 0.0, 0.01).value, 0.5);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0.3, 0), 0.3);
        assert!((lr_schedule(0.1, 1) - 0.05).abs() < 1e-15);
        let eta0 = 0.1;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for r in 0..100_000 {
            let eta = lr_schedule(eta0, r);
            sum += eta;
            sum_sq += eta * eta;
        }
        // harmonic growth: about eta0 * ln(N)
        assert!(sum > eta0 * 11.0);
        assert!(sum_sq <= eta0 * eta0 * std::f64::consts::PI.powi(2) / 6.0);
    }

    #[test]
    fn config_validation() {
        assert!(LearnerConfig::default().validate().is_ok());
        let bad = LearnerConfig {
            gamma: 0.0,
            ..LearnerConfig::default()
        };
        assert_eq!(bad.validate(), Err(LearnerError::Gamma(0.0)));
        let bad = LearnerConfig {
            lambda: -1.0,
            ..LearnerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
