//! Paired SLM/LLM token distributions.
//!
//! The simulator never runs a language model. Distributions come either from
//! a synthetic generator with an agreement knob and two sharpness knobs, or
//! from a logit-trace file recorded elsewhere.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token identifier, an index into the vocabulary.
pub type TokenId = usize;

/// Smallest probability used as a ratio denominator.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the probability sum of a [`TokenDistribution`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Tolerance applied to trace rows before renormalizing them.
pub const TRACE_NORMALIZATION_TOL: f64 = 1e-6;

/// Total Dirichlet concentration spread over the non-mode tokens.
const BACKGROUND_CONCENTRATION: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("distribution is empty")]
    Empty,
    #[error("probability at index {index} is negative or not finite ({value})")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelSourceError {
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("agreement must lie in [0, 1], got {0}")]
    Agreement(f64),
    #[error("sharpness must be positive and finite, got {0}")]
    Sharpness(f64),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("failed to read trace {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: row width {found} does not match vocabulary size {expected}")]
    VocabMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    size: usize,
}

impl VocabSpec {
    pub fn new(size: usize) -> Result<Self, ModelSourceError> {
        if size < 2 {
            return Err(ModelSourceError::VocabTooSmall(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Wraps `probs`, which must be non-negative and sum to 1 within
    /// [`NORMALIZATION_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        let sum = check_entries(&probs)?;
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(DistributionError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self, DistributionError> {
        let sum = check_entries(&weights)?;
        if sum <= 0.0 {
            return Err(DistributionError::NotNormalized { sum });
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Self { probs: weights })
    }

    /// All mass on `token`.
    pub fn one_hot(size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; size];
        probs[token] = 1.0;
        Self { probs }
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token]
    }

    /// Copy with every entry raised to at least [`PROB_FLOOR`], renormalized.
    pub fn clamped(&self) -> Self {
        let weights = self.probs.iter().map(|&p| p.max(PROB_FLOOR)).collect();
        Self::from_weights(weights).expect("clamped weights are positive")
    }

    pub fn argmax(&self) -> TokenId {
        argmax_token(self)
    }
}

fn check_entries(probs: &[f64]) -> Result<f64, DistributionError> {
    if probs.is_empty() {
        return Err(DistributionError::Empty);
    }
    let mut sum = 0.0;
    for (index, &value) in probs.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(DistributionError::InvalidEntry { index, value });
        }
        sum += value;
    }
    Ok(sum)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax_token(dist: &TokenDistribution) -> TokenId {
    let mut best = 0;
    for (i, &p) in dist.probs.iter().enumerate().skip(1) {
        if p > dist.probs[best] {
            best = i;
        }
    }
    best
}

/// Knobs of the synthetic SLM/LLM pair generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    /// Probability that the LLM's mode equals the SLM's mode.
    pub agreement: f64,
    /// Dirichlet concentration on the SLM mode.
    pub slm_sharpness: f64,
    /// Dirichlet concentration on the LLM mode.
    pub llm_sharpness: f64,
    pub vocab: VocabSpec,
}

impl Default for ModelProfile {
    fn default() -> Self {
        Self {
            agreement: 0.9,
            slm_sharpness: 400.0,
            llm_sharpness: 100.0,
            vocab: VocabSpec { size: 512 },
        }
    }
}

impl ModelProfile {
    pub fn validate(&self) -> Result<(), ModelSourceError> {
        VocabSpec::new(self.vocab.size)?;
        if !(0.0..=1.0).contains(&self.agreement) {
            return Err(ModelSourceError::Agreement(self.agreement));
        }
        for s in [self.slm_sharpness, self.llm_sharpness] {
            if !(s.is_finite() && s > 0.0) {
                return Err(ModelSourceError::Sharpness(s));
            }
        }
        Ok(())
    }
}

/// Draws a distribution peaked at `mode`.
///
/// The vector is Dirichlet with concentration `sharpness` on the mode and a
/// fixed total background concentration over the rest; the largest draw is
/// then swapped into the mode slot so the argmax is always `mode`.
pub fn peaked_distribution<R: Rng + ?Sized>(
    vocab: VocabSpec,
    mode: TokenId,
    sharpness: f64,
    rng: &mut R,
) -> TokenDistribution {
    let size = vocab.size();
    let background = BACKGROUND_CONCENTRATION / (size - 1) as f64;
    let mode_gamma = Gamma::new(sharpness, 1.0).expect("sharpness is positive");
    let bg_gamma = Gamma::new(background, 1.0).expect("background is positive");
    let mut weights: Vec<f64> = (0..size)
        .map(|i| {
            if i == mode {
                mode_gamma.sample(rng)
            } else {
                bg_gamma.sample(rng)
            }
        })
        .collect();
    let top = weights.iter().enumerate().fold(
        mode,
        |best, (i, &w)| if w > weights[best] { i } else { best },
    );
    weights.swap(mode, top);
    TokenDistribution::from_weights(weights)
        .unwrap_or_else(|_| TokenDistribution::one_hot(size, mode))
}

/// One synthetic SLM/LLM pair.
///
/// The SLM mode is uniform over the vocabulary; the LLM shares it with
/// probability `profile.agreement` and otherwise picks a uniformly chosen
/// different token.
pub fn gen_distribution_pair<R: Rng + ?Sized>(
    profile: &ModelProfile,
    rng: &mut R,
) -> (TokenDistribution, TokenDistribution) {
    let size = profile.vocab.size();
    let slm_mode = rng.random_range(0..size);
    let llm_mode = if rng.random::<f64>() < profile.agreement {
        slm_mode
    } else {
        other_token(size, slm_mode, rng)
    };
    let slm = peaked_distribution(profile.vocab, slm_mode, profile.slm_sharpness, rng);
    let llm = peaked_distribution(profile.vocab, llm_mode, profile.llm_sharpness, rng);
    (slm, llm)
}

/// Uniform token in `0..size` other than `exclude`.
pub fn other_token<R: Rng + ?Sized>(size: usize, exclude: TokenId, rng: &mut R) -> TokenId {
    let t = rng.random_range(0..size - 1);
    if t >= exclude {
        t + 1
    } else {
        t
    }
}

/// One row of a logit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub slm: TokenDistribution,
    pub llm: TokenDistribution,
    pub reference_token: TokenId,
}

/// Reads a logit trace: a `# vocab=<V>` header followed by rows of
/// `reference_token,slm_p0..slm_p{V-1},llm_p0..llm_p{V-1}`.
pub fn load_logit_trace(path: &Path, vocab: VocabSpec) -> Result<Vec<TraceRow>, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_logit_trace(&text, vocab)
}

pub fn parse_logit_trace(text: &str, vocab: VocabSpec) -> Result<Vec<TraceRow>, TraceError> {
    let v = vocab.size();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(TraceError::MalformedRow {
        line: 1,
        reason: "missing `# vocab=<V>` header".into(),
    })?;
    let declared = header
        .trim()
        .strip_prefix("# vocab=")
        .and_then(|s| s.trim().parse::<usize>().ok())
        .ok_or_else(|| TraceError::MalformedRow {
            line: 1,
            reason: format!("bad header {header:?}"),
        })?;
    if declared != v {
        return Err(TraceError::VocabMismatch {
            line: 1,
            expected: v,
            found: declared,
        });
    }

    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| TraceError::MalformedRow { line, reason };
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() < 3 || !(fields.len() - 1).is_multiple_of(2) {
            return Err(malformed(format!("{} columns", fields.len())));
        }
        let width = (fields.len() - 1) / 2;
        if width != v {
            return Err(TraceError::VocabMismatch {
                line,
                expected: v,
                found: width,
            });
        }
        let reference_token: TokenId = fields[0]
            .trim()
            .parse()
            .map_err(|_| malformed(format!("bad reference token {:?}", fields[0])))?;
        if reference_token >= v {
            return Err(malformed(format!(
                "reference token {reference_token} out of range"
            )));
        }
        let parse_block = |block: &[&str]| -> Result<TokenDistribution, TraceError> {
            let probs = block
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| malformed(e.to_string()))?;
            trace_distribution(probs).map_err(|e| malformed(e.to_string()))
        };
        let slm = parse_block(&fields[1..1 + v])?;
        let llm = parse_block(&fields[1 + v..])?;
        rows.push(TraceRow {
            slm,
            llm,
            reference_token,
        });
    }
    Ok(rows)
}

fn trace_distribution(probs: Vec<f64>) -> Result<TokenDistribution, DistributionError> {
    let sum = check_entries(&probs)?;
    if (sum - 1.0).abs() > TRACE_NORMALIZATION_TOL {
        return Err(DistributionError::NotNormalized { sum });
    }
    if (sum - 1.0).abs() <= NORMALIZATION_TOL {
        Ok(TokenDistribution { probs })
    } else {
        TokenDistribution::from_weights(probs)
    }
}

/// Serializes rows in the trace format; floats use the shortest exact form.
pub fn format_logit_trace(rows: &[TraceRow], vocab: VocabSpec) -> String {
    let mut out = format!("# vocab={}\n", vocab.size());
    for row in rows {
        let _ = write!(out, "{}", row.reference_token);
        for p in row.slm.probs().iter().chain(row.llm.probs()) {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}

pub fn write_logit_trace(path: &Path, rows: &[TraceRow], vocab: VocabSpec) -> std::io::Result<()> {
    fs::write(path, format_logit_trace(rows, vocab))
}
