//! Token-level uncertainty and routing decisions.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_source::{argmax_token, TokenDistribution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("num_samples must be at least 1")]
    NoSamples,
    #[error("temperature must be greater than 1, got {0}")]
    Temperature(f64),
}

/// Monte-Carlo disagreement sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_samples: usize,
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_samples: 10,
            temperature: 2.0,
        }
    }
}

impl SamplerConfig {
    pub fn new(num_samples: usize, temperature: f64) -> Result<Self, SamplerError> {
        let cfg = Self {
            num_samples,
            temperature,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.num_samples == 0 {
            return Err(SamplerError::NoSamples);
        }
        if !(self.temperature.is_finite() && self.temperature > 1.0) {
            return Err(SamplerError::Temperature(self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncertaintyKind {
    Entropy,
    McDisagreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub value: f64,
    pub kind: UncertaintyKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingDecision {
    pub transmit: bool,
    pub soft_value: Option<f64>,
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy_score(dist: &TokenDistribution) -> UncertaintyScore {
    let value = -dist
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();
    UncertaintyScore {
        value: value.max(0.0),
        kind: UncertaintyKind::Entropy,
    }
}

/// Temperature-softened copy: weights `p_i^(1/T)`, renormalized.
pub fn soften(dist: &TokenDistribution, temperature: f64) -> Vec<f64> {
    let inv_t = 1.0 / temperature;
    let weights: Vec<f64> = dist
        .probs()
        .iter()
        .map(|&p| if p > 0.0 { p.powf(inv_t) } else { 0.0 })
        .collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / sum).collect()
}

/// Fraction of `K` softened samples that differ from the argmax.
pub fn mc_disagreement<R: Rng + ?Sized>(
    dist: &TokenDistribution,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> UncertaintyScore {
    let top = argmax_token(dist);
    let softened = soften(dist, sampler.temperature);
    let index = WeightedIndex::new(&softened).expect("softened weights are valid");
    let misses = (0..sampler.num_samples)
        .filter(|_| index.sample(rng) != top)
        .count();
    UncertaintyScore {
        value: misses as f64 / sampler.num_samples as f64,
        kind: UncertaintyKind::McDisagreement,
    }
}

/// Retain locally iff `u <= u_th`.
pub fn hard_route(u: UncertaintyScore, u_th: f64) -> RoutingDecision {
    RoutingDecision {
        transmit: u.value > u_th,
        soft_value: None,
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Differentiable relaxation of [`hard_route`]: `σ(γ(u − u_th))`.
pub fn soft_route(u: f64, u_th: f64, gamma: f64) -> f64 {
    sigmoid(gamma * (u - u_th))
}
