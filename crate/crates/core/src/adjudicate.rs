//! Cloud-side adjudication of escalated tokens.
//!
//! The LLM rejects the submitted token with its rejection probability and
//! resamples from the residual `norm(max(llm − slm, 0))`, which makes the
//! marginal of the returned token equal the LLM distribution whenever the
//! submitted token was itself drawn from the SLM.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model_source::{TokenDistribution, TokenId};
use crate::threshold::rejection_probability;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adjudication {
    Accept,
    RejectResample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationResult {
    pub decision: Adjudication,
    pub final_token: TokenId,
    pub beta: f64,
}

pub fn llm_adjudicate<R: Rng + ?Sized>(
    slm: &TokenDistribution,
    llm: &TokenDistribution,
    token: TokenId,
    rng: &mut R,
) -> AdjudicationResult {
    let beta = rejection_probability(slm, llm, token);
    if rng.random::<f64>() >= beta {
        return AdjudicationResult {
            decision: Adjudication::Accept,
            final_token: token,
            beta,
        };
    }
    AdjudicationResult {
        decision: Adjudication::RejectResample,
        final_token: resample(slm, llm, rng),
        beta,
    }
}

/// Draw from `norm(max(llm − slm, 0))`, or from `llm` if the residual is empty.
pub fn resample<R: Rng + ?Sized>(
    slm: &TokenDistribution,
    llm: &TokenDistribution,
    rng: &mut R,
) -> TokenId {
    let residual: Vec<f64> = llm
        .probs()
        .iter()
        .zip(slm.probs())
        .map(|(q, p)| (q - p).max(0.0))
        .collect();
    match WeightedIndex::new(&residual) {
        Ok(index) => index.sample(rng),
        Err(_) => WeightedIndex::new(llm.probs())
            .expect("llm distribution has mass")
            .sample(rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn zero_beta_always_accepts() {
        let slm = dist(&[0.3, 0.7]);
        let llm = dist(&[0.6, 0.4]);
        let mut rng = seeded(1);
        for _ in 0..1_000 {
            let r = llm_adjudicate(&slm, &llm, 0, &mut rng);
            assert_eq!(r.decision, Adjudication::Accept);
            assert_eq!(r.final_token, 0);
            assert_eq!(r.beta, 0.0);
        }
    }

    #[test]
    fn unit_beta_always_resamples_elsewhere() {
        let slm = dist(&[0.8, 0.1, 0.1]);
        let llm = dist(&[0.0, 0.5, 0.5]);
        let mut rng = seeded(2);
        for _ in 0..1_000 {
            let r = llm_adjudicate(&slm, &llm, 0, &mut rng);
            assert_eq!(r.decision, Adjudication::RejectResample);
            assert_ne!(r.final_token, 0);
            assert_eq!(r.beta, 1.0);
        }
    }

    #[test]
    fn identical_distributions_fall_back_to_llm() {
        let d = dist(&[0.5, 0.5]);
        let t = resample(&d, &d, &mut seeded(4));
        assert!(t < 2);
    }

    #[test]
    fn deterministic_under_seed() {
        let slm = dist(&[0.5, 0.3, 0.2]);
        let llm = dist(&[0.2, 0.3, 0.5]);
        let a: Vec<_> = {
            let mut rng = seeded(8);
            (0..50)
                .map(|_| llm_adjudicate(&slm, &llm, 0, &mut rng))
                .collect()
        };
        let b: Vec<_> = {
            let mut rng = seeded(8);
            (0..50)
                .map(|_| llm_adjudicate(&slm, &llm, 0, &mut rng))
                .collect()
        };
        assert_eq!(a, b);
    }
}
