//! Embedding-based peer consensus, edge validation and the per-client
//! semantic token cache.

use std::collections::VecDeque;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_source::{TokenId, VocabSpec};
use crate::rng::{derive_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeerError {
    #[error("embedding has zero or non-finite norm")]
    ZeroNorm,
    #[error("no peer embeddings")]
    NoPeers,
    #[error("embedding dimension {found} does not match {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("similarity threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, PeerError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(PeerError::ZeroNorm);
        }
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, c: f64) -> Result<Self, PeerError> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeerConfig {
    /// θ for intra-cluster consensus and cache hits.
    pub similarity_threshold: f64,
    /// θ for inter-cluster validation at the edge.
    pub edge_similarity_threshold: f64,
    pub embedding_dim: usize,
    pub cache_capacity: usize,
}

impl Default for PeerConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.85,
            edge_similarity_threshold: 0.85,
            embedding_dim: 64,
            cache_capacity: 256,
        }
    }
}

impl PeerConfig {
    pub fn validate(&self) -> Result<(), PeerError> {
        for t in [self.similarity_threshold, self.edge_similarity_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(PeerError::Threshold(t));
            }
        }
        if self.embedding_dim == 0 {
            return Err(PeerError::NonPositive("embedding_dim"));
        }
        if self.cache_capacity == 0 {
            return Err(PeerError::NonPositive("cache_capacity"));
        }
        Ok(())
    }
}

/// Fixed pseudo-random unit vector for `token`, keyed by `seed`.
pub fn token_embedding(token: TokenId, vocab: VocabSpec, dim: usize, seed: u64) -> Embedding {
    assert!(token < vocab.size(), "token {token} outside vocabulary");
    embedding_draw(token, dim, seed, 0)
}

fn embedding_draw(token: TokenId, dim: usize, seed: u64, attempt: u64) -> Embedding {
    let mut rng = derive_rng(
        seed,
        Stream::Embedding,
        &[dim as u64, token as u64, attempt],
    );
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Ok(e) = Embedding::new(raw) {
            let inv = 1.0 / e.norm;
            return Embedding::new(e.values.iter().map(|v| v * inv).collect())
                .expect("unit vector");
        }
    }
}

/// Largest |cosine| allowed between two distinct tokens in a table.
pub const MAX_TOKEN_SIMILARITY: f64 = 0.5;

/// Embeddings for every token in the vocabulary, computed once per run.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vectors: Vec<Embedding>,
}

impl EmbeddingTable {
    /// Draws each token's vector in id order, redrawing it while it is within
    /// [`MAX_TOKEN_SIMILARITY`] of an earlier token. At `dim = 64` roughly one
    /// pair in 15,000 needs a redraw.
    ///
    /// # Panics
    /// If a token cannot be placed in 1,000 attempts (vocabulary far too large
    /// for `dim`).
    pub fn new(vocab: VocabSpec, dim: usize, seed: u64) -> Self {
        let mut vectors: Vec<Embedding> = Vec::with_capacity(vocab.size());
        for t in 0..vocab.size() {
            let e = (0..1000)
                .map(|attempt| embedding_draw(t, dim, seed, attempt))
                .find(|e| {
                    vectors
                        .iter()
                        .all(|v| cosine_similarity(e, v).abs() < MAX_TOKEN_SIMILARITY)
                })
                .unwrap_or_else(|| {
                    panic!(
                        "cannot separate {} tokens in {dim} dimensions",
                        vocab.size()
                    )
                });
            vectors.push(e);
        }
        Self { vectors }
    }

    pub fn get(&self, token: TokenId) -> &Embedding {
        &self.vectors[token]
    }
}

/// Elementwise mean of the peers' embeddings.
pub fn centroid(peers: &[&Embedding]) -> Result<Embedding, PeerError> {
    let first = peers.first().ok_or(PeerError::NoPeers)?;
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for p in peers {
        if p.dim() != dim {
            return Err(PeerError::Dimension {
                expected: dim,
                found: p.dim(),
            });
        }
        for (s, v) in sum.iter_mut().zip(&p.values) {
            *s += v;
        }
    }
    let n = peers.len() as f64;
    Embedding::new(sum.into_iter().map(|s| s / n).collect())
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> f64 {
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    (dot / (a.norm * b.norm)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Consensus {
    AcceptLocal,
    Escalate,
}

/// Accept iff the similarity to the peer centroid reaches θ.
pub fn peer_consensus(own: &Embedding, peers: &[&Embedding], cfg: &PeerConfig) -> Consensus {
    match centroid(peers) {
        Ok(c) if cosine_similarity(own, &c) >= cfg.similarity_threshold => Consensus::AcceptLocal,
        _ => Consensus::Escalate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeDecision {
    AcceptEdge,
    EscalateToLLM,
}

/// Accept iff some neighbouring cluster's centroid is within θ.
pub fn edge_validate(
    own: &Embedding,
    neighbor_centroids: &[Embedding],
    cfg: &PeerConfig,
) -> EdgeDecision {
    let best = neighbor_centroids
        .iter()
        .map(|c| cosine_similarity(own, c))
        .fold(f64::NEG_INFINITY, f64::max);
    if best >= cfg.edge_similarity_threshold {
        EdgeDecision::AcceptEdge
    } else {
        EdgeDecision::EscalateToLLM
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheLookup {
    Hit(TokenId),
    Miss,
}

/// Bounded LRU cache of validated tokens, matched by cosine similarity.
///
/// Entries are kept oldest first; the back is the most recently used.
#[derive(Debug, Clone)]
pub struct TokenCache {
    capacity: usize,
    entries: VecDeque<(Embedding, TokenId)>,
}

impl TokenCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "cache capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tokens from least to most recently used.
    pub fn tokens(&self) -> Vec<TokenId> {
        self.entries.iter().map(|(_, t)| *t).collect()
    }

    /// Best entry at or above θ; a hit becomes the most recent entry.
    pub fn lookup(&mut self, query: &Embedding, cfg: &PeerConfig) -> CacheLookup {
        let mut best: Option<(usize, f64)> = None;
        for (i, (e, _)) in self.entries.iter().enumerate() {
            let sim = cosine_similarity(query, e);
            if sim >= cfg.similarity_threshold && best.is_none_or(|(_, s)| sim > s) {
                best = Some((i, sim));
            }
        }
        match best {
            Some((i, _)) => {
                let entry = self.entries.remove(i).expect("index in range");
                let token = entry.1;
                self.entries.push_back(entry);
                CacheLookup::Hit(token)
            }
            None => CacheLookup::Miss,
        }
    }

    /// Inserts as most recent, refreshing an existing entry for the same
    /// token and evicting the least recently used past capacity.
    pub fn insert(&mut self, e: Embedding, token: TokenId) {
        if let Some(i) = self.entries.iter().position(|(_, t)| *t == token) {
            self.entries.remove(i);
        }
        self.entries.push_back((e, token));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }
}
