//! Round-by-round simulation of the client → peer → edge → cloud pipeline
//! with federated threshold learning.
//!
//! Every timestep runs in three phases. Each client first predicts a token
//! and scores its uncertainty, then all predicted-token embeddings are
//! published, and finally each client resolves its token against its cache,
//! its cluster peers, the neighbouring clusters and, last, the cloud LLM.
//! Clients only touch their own state and their own random stream inside a
//! phase, so running them in parallel cannot change the result.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Zipf;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjudicate::{llm_adjudicate, Adjudication};
use crate::cost::{should_attempt_p2p, CostModel, HitEstimator};
use crate::federation::{
    class_competence, dirichlet_partition, hierarchical_aggregate, AggregationReport, ClassLayout,
    ClusterTopology, PartitionSpec,
};
use crate::model_source::{
    load_logit_trace, other_token, peaked_distribution, ModelProfile, TokenDistribution, TokenId,
    TraceError, TraceRow, VocabSpec,
};
use crate::peer::{
    centroid, edge_validate, peer_consensus, CacheLookup, Consensus, EdgeDecision, Embedding,
    EmbeddingTable, PeerConfig, TokenCache,
};
use crate::rng::{derive_key, derive_rng, SimRng, Stream};
use crate::threshold::{
    loss_gradient, lr_schedule, sgd_step_with, ClientRoundStats, LearnerConfig, RejectionFeedback,
    Threshold,
};
use crate::uncertainty::{
    entropy_score, hard_route, mc_disagreement, SamplerConfig, UncertaintyKind,
};

/// Competence never drops below this, keeping SLM sharpness positive.
const MIN_COMPETENCE: f64 = 0.05;

/// Mass a wrong SLM guess leaves on the right token. Small models that miss
/// usually still rank the answer close behind, which is what makes their
/// uncertainty informative.
const RIVAL_SHARE: std::ops::Range<f64> = 0.2..0.45;

/// `(1 − share)·dist + share·δ_token`.
fn with_rival(dist: &TokenDistribution, token: TokenId, share: f64) -> TokenDistribution {
    let mut probs: Vec<f64> = dist.probs().iter().map(|p| p * (1.0 - share)).collect();
    probs[token] += share;
    TokenDistribution::from_weights(probs).expect("convex mix of distributions")
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("run_baseline needs mode rand or uhlm")]
    NotABaseline,
    #[error("token history is empty")]
    EmptyHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeKind {
    FedHlm,
    RandHlm,
    UHlm,
}

/// Routing policy with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    FedHlm,
    /// Offload each token with probability `p_offload`, else keep it.
    RandHlm {
        p_offload: f64,
    },
    /// Fixed threshold, straight to the cloud, no peers, no learning.
    UHlm {
        static_threshold: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub p_offload: f64,
    /// `None` means the run's initial threshold.
    pub static_threshold: Option<f64>,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            p_offload: 0.7,
            static_threshold: None,
        }
    }
}

/// Shape of the synthetic prompt stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Zipf exponent of reference tokens within a class region.
    pub zipf_exponent: f64,
    /// How strongly a client's class mixture affects its SLM on a class.
    pub skew_sensitivity: f64,
    /// Chance that a cluster works on the common prompt at a timestep;
    /// otherwise each member draws a private prompt.
    pub shared_prompt_prob: f64,
    /// Read distributions from a logit trace instead of synthesizing them.
    pub trace_path: Option<PathBuf>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            zipf_exponent: 1.1,
            skew_sensitivity: 0.5,
            shared_prompt_prob: 0.5,
            trace_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub topology: ClusterTopology,
    pub partition: PartitionSpec,
    pub rounds: u32,
    pub tokens_per_client_per_round: usize,
    pub profile: ModelProfile,
    pub sampler: SamplerConfig,
    pub score: UncertaintyKind,
    pub learner: LearnerConfig,
    pub peer: PeerConfig,
    pub cost: CostModel,
    pub p_hit_window: usize,
    pub p_hit_prior: f64,
    pub mode: ModeKind,
    pub baseline: BaselineSpec,
    pub initial_threshold: f64,
    pub workload: WorkloadSpec,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            topology: ClusterTopology::contiguous(20, 4).expect("20 clients over 4 clusters"),
            partition: PartitionSpec::default(),
            rounds: 30,
            tokens_per_client_per_round: 30,
            profile: ModelProfile::default(),
            sampler: SamplerConfig::default(),
            score: UncertaintyKind::McDisagreement,
            learner: LearnerConfig::default(),
            peer: PeerConfig::default(),
            cost: CostModel::default(),
            p_hit_window: 50,
            p_hit_prior: 0.5,
            mode: ModeKind::FedHlm,
            baseline: BaselineSpec::default(),
            initial_threshold: 0.1,
            workload: WorkloadSpec::default(),
            seed: 2024,
            parallel: true,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |e: &dyn std::fmt::Display| SimError::ConfigInvalid(e.to_string());
        if self.rounds == 0 {
            return Err(SimError::ConfigInvalid("rounds must be at least 1".into()));
        }
        if self.tokens_per_client_per_round == 0 {
            return Err(SimError::ConfigInvalid(
                "tokens_per_client_per_round must be at least 1".into(),
            ));
        }
        self.partition.validate().map_err(|e| invalid(&e))?;
        self.profile.validate().map_err(|e| invalid(&e))?;
        self.sampler.validate().map_err(|e| invalid(&e))?;
        self.learner.validate().map_err(|e| invalid(&e))?;
        self.peer.validate().map_err(|e| invalid(&e))?;
        self.cost.validate().map_err(|e| invalid(&e))?;
        HitEstimator::new(self.p_hit_window, self.p_hit_prior).map_err(|e| invalid(&e))?;
        if ClassLayout::new(self.profile.vocab, self.partition.num_classes).is_none() {
            return Err(SimError::ConfigInvalid(
                "vocabulary smaller than the number of classes".into(),
            ));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SimError::ConfigInvalid(format!(
                    "{name} must lie in [0, 1], got {v}"
                )))
            }
        };
        unit("initial_threshold", self.initial_threshold)?;
        unit("baseline.p_offload", self.baseline.p_offload)?;
        if let Some(t) = self.baseline.static_threshold {
            unit("baseline.static_threshold", t)?;
        }
        unit("workload.skew_sensitivity", self.workload.skew_sensitivity)?;
        unit(
            "workload.shared_prompt_prob",
            self.workload.shared_prompt_prob,
        )?;
        if !(self.workload.zipf_exponent.is_finite() && self.workload.zipf_exponent >= 0.0) {
            return Err(SimError::ConfigInvalid(
                "workload.zipf_exponent must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        match self.mode {
            ModeKind::FedHlm => Mode::FedHlm,
            ModeKind::RandHlm => Mode::RandHlm {
                p_offload: self.baseline.p_offload,
            },
            ModeKind::UHlm => Mode::UHlm {
                static_threshold: self
                    .baseline
                    .static_threshold
                    .unwrap_or(self.initial_threshold),
            },
        }
    }

    pub fn total_tokens_per_round(&self) -> usize {
        self.topology.num_clients() * self.tokens_per_client_per_round
    }

    pub fn tokens_per_client(&self) -> usize {
        self.rounds as usize * self.tokens_per_client_per_round
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Local,
    PeerP2P,
    Edge,
    #[serde(rename = "LLM")]
    Llm,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Local => "Local",
            Stage::PeerP2P => "PeerP2P",
            Stage::Edge => "Edge",
            Stage::Llm => "LLM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenOutcome {
    pub stage: Stage,
    pub predicted_token: TokenId,
    pub final_token: TokenId,
    pub charged_cost: f64,
    pub uncertainty: f64,
    pub correct: bool,
    /// Rejection probability, present only for LLM-adjudicated tokens.
    pub beta: Option<f64>,
    pub p2p_attempted: bool,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub round: u32,
    pub client: usize,
    pub timestep: usize,
    pub outcome: TokenOutcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub local: u64,
    pub p2p: u64,
    pub edge: u64,
    pub llm: u64,
}

impl StageCounts {
    pub fn add(&mut self, stage: Stage) {
        match stage {
            Stage::Local => self.local += 1,
            Stage::PeerP2P => self.p2p += 1,
            Stage::Edge => self.edge += 1,
            Stage::Llm => self.llm += 1,
        }
    }

    pub fn merge(&mut self, other: &StageCounts) {
        self.local += other.local;
        self.p2p += other.p2p;
        self.edge += other.edge;
        self.llm += other.llm;
    }

    pub fn total(&self) -> u64 {
        self.local + self.p2p + self.edge + self.llm
    }

    pub fn fraction(&self, stage: Stage) -> f64 {
        let n = match stage {
            Stage::Local => self.local,
            Stage::PeerP2P => self.p2p,
            Stage::Edge => self.edge,
            Stage::Llm => self.llm,
        };
        n as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub per_client: Vec<ClientRoundStats>,
    pub outcome_counts: StageCounts,
    /// Each client's threshold after its local step, before broadcast.
    pub local_thresholds: Vec<f64>,
    /// Each client's threshold for the next round.
    pub thresholds_after: Vec<f64>,
    pub global_threshold: f64,
    pub aggregation: Option<AggregationReport>,
    pub total_cost: f64,
    pub avg_uncertainty: f64,
    /// Mean rejection probability over LLM-adjudicated tokens.
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    /// Normalized entropy of the client's final tokens.
    pub token_entropy: f64,
    /// Escalated tokens resolved by cache or peers over P2P attempts.
    pub cache_hit_ratio: f64,
    pub llm_token_count: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub rounds: Vec<RoundReport>,
    pub clients: Vec<ClientMetrics>,
    pub events: Vec<TokenEvent>,
}

impl SimulationReport {
    pub fn totals(&self) -> StageCounts {
        let mut c = StageCounts::default();
        for r in &self.rounds {
            c.merge(&r.outcome_counts);
        }
        c
    }

    pub fn total_cost(&self) -> f64 {
        self.rounds.iter().map(|r| r.total_cost).sum()
    }

    pub fn final_threshold(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.global_threshold)
    }
}

/// Per-client mutable state, owned by one logical thread.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub cluster: usize,
    pub threshold: Threshold,
    pub cache: TokenCache,
    pub estimator: HitEstimator,
    pub mixture: Vec<f64>,
    pub history: Vec<TokenId>,
    pub stats: ClientRoundStats,
    rng: SimRng,
    correct: u64,
    p2p_attempts: u64,
    p2p_hits: u64,
    llm_count: u64,
}

impl ClientState {
    pub fn new(id: usize, cluster: usize, mixture: Vec<f64>, cfg: &SimulationConfig) -> Self {
        Self {
            id,
            cluster,
            threshold: Threshold::new(cfg.initial_threshold),
            cache: TokenCache::new(cfg.peer.cache_capacity),
            estimator: HitEstimator::new(cfg.p_hit_window, cfg.p_hit_prior)
                .expect("validated config"),
            mixture,
            history: Vec::new(),
            stats: ClientRoundStats::default(),
            rng: derive_rng(cfg.seed, Stream::Client, &[id as u64, u64::MAX]),
            correct: 0,
            p2p_attempts: 0,
            p2p_hits: 0,
            llm_count: 0,
        }
    }

    fn start_round(&mut self, seed: u64, round: u32) {
        self.rng = derive_rng(seed, Stream::Client, &[self.id as u64, u64::from(round)]);
        self.stats = ClientRoundStats::default();
    }

    fn record(&mut self, outcome: &TokenOutcome) {
        self.history.push(outcome.final_token);
        self.correct += u64::from(outcome.correct);
        if outcome.p2p_attempted {
            self.p2p_attempts += 1;
            self.p2p_hits += u64::from(outcome.stage == Stage::PeerP2P);
        }
        if outcome.stage != Stage::Local {
            self.stats.transmitted_count += 1;
        }
        if outcome.stage == Stage::Llm {
            self.llm_count += 1;
        }
    }

    pub fn metrics(&self, vocab: VocabSpec) -> ClientMetrics {
        let n = self.history.len().max(1) as f64;
        ClientMetrics {
            client: self.id,
            token_entropy: client_token_entropy(&self.history, vocab).unwrap_or(0.0),
            cache_hit_ratio: if self.p2p_attempts == 0 {
                0.0
            } else {
                self.p2p_hits as f64 / self.p2p_attempts as f64
            },
            llm_token_count: self.llm_count,
            accuracy: self.correct as f64 / n,
        }
    }
}

/// Shannon entropy of the empirical token frequencies, divided by `ln |V|`.
pub fn client_token_entropy(history: &[TokenId], vocab: VocabSpec) -> Result<f64, SimError> {
    if history.is_empty() {
        return Err(SimError::EmptyHistory);
    }
    let mut counts: HashMap<TokenId, u64> = HashMap::new();
    for &t in history {
        *counts.entry(t).or_default() += 1;
    }
    let n = history.len() as f64;
    let mut freqs: Vec<u64> = counts.into_values().collect();
    freqs.sort_unstable();
    let h: f64 = freqs
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok((h / (vocab.size() as f64).ln()).clamp(0.0, 1.0))
}

/// Everything a client needs to resolve one uncertain-or-not token.
#[derive(Debug)]
pub struct TokenContext<'a> {
    pub slm: &'a TokenDistribution,
    pub llm: &'a TokenDistribution,
    pub predicted: TokenId,
    pub uncertainty: f64,
    /// Ground truth for the accuracy proxy.
    pub reference: TokenId,
    pub own: &'a Embedding,
    /// Predicted-token embeddings of the other members of the cluster.
    pub peers: Vec<&'a Embedding>,
    pub neighbor_centroids: &'a [Embedding],
    pub embeddings: &'a EmbeddingTable,
}

/// Runs one token through local → cache/peers → edge → LLM.
pub fn resolve_token<R: Rng + ?Sized>(
    client: &mut ClientState,
    ctx: &TokenContext<'_>,
    peer_cfg: &PeerConfig,
    cost: &CostModel,
    rng: &mut R,
) -> TokenOutcome {
    let mut outcome = TokenOutcome {
        stage: Stage::Local,
        predicted_token: ctx.predicted,
        final_token: ctx.predicted,
        charged_cost: 0.0,
        uncertainty: ctx.uncertainty,
        correct: ctx.predicted == ctx.reference,
        beta: None,
        p2p_attempted: false,
        cache_hit: false,
    };
    if ctx.uncertainty <= client.threshold.value {
        remember(client, ctx, outcome.final_token);
        return outcome;
    }

    let attempt = should_attempt_p2p(client.estimator.estimate(), cost);
    outcome.p2p_attempted = attempt;
    if attempt {
        let resolved = match client.cache.lookup(ctx.own, peer_cfg) {
            CacheLookup::Hit(token) => {
                outcome.cache_hit = true;
                Some(token)
            }
            CacheLookup::Miss => (peer_consensus(ctx.own, &ctx.peers, peer_cfg)
                == Consensus::AcceptLocal)
                .then_some(ctx.predicted),
        };
        client.estimator.record(resolved.is_some());
        if let Some(token) = resolved {
            outcome.stage = Stage::PeerP2P;
            outcome.final_token = token;
            outcome.charged_cost = cost.c_p2p;
        }
    }

    if outcome.stage == Stage::Local {
        if edge_validate(ctx.own, ctx.neighbor_centroids, peer_cfg) == EdgeDecision::AcceptEdge {
            outcome.stage = Stage::Edge;
            outcome.charged_cost = cost.c_p2p;
        } else {
            let verdict = llm_adjudicate(ctx.slm, ctx.llm, ctx.predicted, rng);
            outcome.stage = Stage::Llm;
            outcome.final_token = verdict.final_token;
            outcome.beta = Some(verdict.beta);
            outcome.charged_cost = if attempt {
                cost.c_p2p + cost.c_llm
            } else {
                cost.c_llm
            };
            client.stats.feedback.push(RejectionFeedback {
                beta: verdict.beta,
                token: ctx.predicted,
                uncertainty: ctx.uncertainty,
            });
            debug_assert!(
                verdict.decision == Adjudication::RejectResample
                    || verdict.final_token == ctx.predicted
            );
        }
    }
    outcome.correct = outcome.final_token == ctx.reference;
    remember(client, ctx, outcome.final_token);
    outcome
}

/// Every accepted token, local or resolved elsewhere, goes into the cache.
fn remember(client: &mut ClientState, ctx: &TokenContext<'_>, token: TokenId) {
    client
        .cache
        .insert(ctx.embeddings.get(token).clone(), token);
}

/// One client's prediction for one timestep.
#[derive(Debug, Clone)]
struct Prediction {
    slm: TokenDistribution,
    llm: TokenDistribution,
    predicted: TokenId,
    uncertainty: f64,
    reference: TokenId,
}

/// What a client is asked to continue at one timestep in synthetic mode.
#[derive(Debug, Clone)]
struct Prompt {
    class: usize,
    reference: TokenId,
    llm: TokenDistribution,
}

/// A simulation in progress.
pub struct Simulation {
    cfg: SimulationConfig,
    mode: Mode,
    clients: Vec<ClientState>,
    embeddings: EmbeddingTable,
    layout: ClassLayout,
    region_zipf: Vec<Zipf<f64>>,
    trace: Option<Vec<TraceRow>>,
    cluster_thresholds: Vec<f64>,
    global_threshold: f64,
}

impl Simulation {
    pub fn new(cfg: SimulationConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let trace = match &cfg.workload.trace_path {
            Some(path) => {
                let rows = load_logit_trace(path, cfg.profile.vocab)?;
                if rows.is_empty() {
                    return Err(SimError::ConfigInvalid(format!(
                        "trace {} has no rows",
                        path.display()
                    )));
                }
                Some(rows)
            }
            None => None,
        };
        let mut partition_rng = derive_rng(cfg.seed, Stream::Partition, &[]);
        let mixtures = dirichlet_partition(&cfg.partition, &cfg.topology, &mut partition_rng);
        let clients = mixtures
            .into_iter()
            .enumerate()
            .map(|(k, m)| ClientState::new(k, cfg.topology.cluster_of(k), m, &cfg))
            .collect();
        let layout = ClassLayout::new(cfg.profile.vocab, cfg.partition.num_classes)
            .expect("validated config");
        let region_zipf = (0..layout.num_classes())
            .map(|c| {
                Zipf::new(layout.region(c).len() as f64, cfg.workload.zipf_exponent)
                    .expect("validated exponent")
            })
            .collect();
        let embeddings = EmbeddingTable::new(
            cfg.profile.vocab,
            cfg.peer.embedding_dim,
            derive_key(cfg.seed, Stream::Embedding, &[]),
        );
        let mode = cfg.mode();
        let start = match mode {
            Mode::UHlm { static_threshold } => static_threshold,
            _ => cfg.initial_threshold,
        };
        let mut sim = Self {
            cluster_thresholds: vec![start; cfg.topology.num_clusters()],
            global_threshold: start,
            cfg,
            mode,
            clients,
            embeddings,
            layout,
            region_zipf,
            trace,
        };
        for c in &mut sim.clients {
            c.threshold = Threshold::new(start);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn client_mixtures(&self) -> Vec<Vec<f64>> {
        self.clients.iter().map(|c| c.mixture.clone()).collect()
    }

    pub fn global_threshold(&self) -> f64 {
        self.global_threshold
    }

    fn prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Prompt {
        let class = rng.random_range(0..self.layout.num_classes());
        let region = self.layout.region(class);
        let rank = self.region_zipf[class].sample(rng) as usize;
        let reference = region.start + rank.clamp(1, region.len()) - 1;
        let llm = peaked_distribution(
            self.cfg.profile.vocab,
            reference,
            self.cfg.profile.llm_sharpness,
            rng,
        );
        Prompt {
            class,
            reference,
            llm,
        }
    }

    fn score(&self, slm: &TokenDistribution, rng: &mut SimRng) -> f64 {
        match self.cfg.score {
            UncertaintyKind::McDisagreement => mc_disagreement(slm, &self.cfg.sampler, rng).value,
            UncertaintyKind::Entropy => {
                entropy_score(slm).value / (self.cfg.profile.vocab.size() as f64).ln()
            }
        }
    }

    fn predict(&self, client: &mut ClientState, prompt: Option<&Prompt>, row: usize) -> Prediction {
        let mut rng = std::mem::replace(&mut client.rng, crate::rng::seeded(0));
        let prediction = match (&self.trace, prompt) {
            (Some(rows), _) => {
                let r = &rows[row % rows.len()];
                let uncertainty = self.score(&r.slm, &mut rng);
                Prediction {
                    predicted: r.slm.argmax(),
                    slm: r.slm.clone(),
                    llm: r.llm.clone(),
                    uncertainty,
                    reference: r.reference_token,
                }
            }
            (None, Some(p)) => {
                let profile = &self.cfg.profile;
                let competence =
                    class_competence(&client.mixture, p.class, self.cfg.workload.skew_sensitivity)
                        .max(MIN_COMPETENCE);
                let right = rng.random::<f64>() < profile.agreement * competence;
                let mode = if right {
                    p.reference
                } else {
                    self.off_target_token(&client.mixture, p.reference, &mut rng)
                };
                let mut slm = peaked_distribution(
                    profile.vocab,
                    mode,
                    profile.slm_sharpness * competence,
                    &mut rng,
                );
                if !right {
                    let share = rng.random_range(RIVAL_SHARE);
                    slm = with_rival(&slm, p.reference, share);
                }
                let uncertainty = self.score(&slm, &mut rng);
                Prediction {
                    predicted: slm.argmax(),
                    slm,
                    llm: p.llm.clone(),
                    uncertainty,
                    reference: p.reference,
                }
            }
            (None, None) => unreachable!("synthetic mode always has a prompt"),
        };
        client.rng = rng;
        prediction
    }

    /// A wrong guess drawn from the client's own class mixture.
    fn off_target_token(&self, mixture: &[f64], reference: TokenId, rng: &mut SimRng) -> TokenId {
        let class = WeightedIndex::new(mixture)
            .map(|w| w.sample(rng))
            .unwrap_or_else(|_| rng.random_range(0..mixture.len()));
        let region = self.layout.region(class);
        if region.len() < 2 && region.contains(&reference) {
            return other_token(self.cfg.profile.vocab.size(), reference, rng);
        }
        loop {
            let t = rng.random_range(region.clone());
            if t != reference {
                return t;
            }
        }
    }

    fn run_parallel<T, F>(&mut self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut ClientState) -> T + Sync + Send,
    {
        if self.cfg.parallel {
            self.clients.par_iter_mut().map(f).collect()
        } else {
            self.clients.iter_mut().map(f).collect()
        }
    }

    /// Simulates round `round` and returns its report and token events.
    pub fn run_round(&mut self, round: u32) -> (RoundReport, Vec<TokenEvent>) {
        let seed = self.cfg.seed;
        for c in &mut self.clients {
            c.start_round(seed, round);
        }
        let k = self.clients.len();
        let steps = self.cfg.tokens_per_client_per_round;
        let mut shared_rng = derive_rng(seed, Stream::Prompt, &[u64::from(round)]);
        let mut private_rngs: Vec<SimRng> = (0..k)
            .map(|c| derive_rng(seed, Stream::Prompt, &[u64::from(round), c as u64 + 1]))
            .collect();
        let mut events: Vec<Vec<TokenEvent>> = vec![Vec::with_capacity(steps); k];

        for t in 0..steps {
            let prompts: Vec<Option<Prompt>> = if self.trace.is_some() {
                vec![None; k]
            } else {
                let shared = self.prompt(&mut shared_rng);
                let share = &self.cfg.workload.shared_prompt_prob;
                let cluster_shares: Vec<bool> = (0..self.cfg.topology.num_clusters())
                    .map(|_| shared_rng.random::<f64>() < *share)
                    .collect();
                private_rngs
                    .iter_mut()
                    .zip(&self.clients)
                    .map(|(rng, client)| {
                        Some(if cluster_shares[client.cluster] {
                            shared.clone()
                        } else {
                            self.prompt(rng)
                        })
                    })
                    .collect()
            };
            let base_row = (round as usize * steps + t) * k;

            let mut clients = std::mem::take(&mut self.clients);
            let predictions: Vec<Prediction> = {
                let this = &*self;
                let predict =
                    |c: &mut ClientState| this.predict(c, prompts[c.id].as_ref(), base_row + c.id);
                if this.cfg.parallel {
                    clients.par_iter_mut().map(predict).collect()
                } else {
                    clients.iter_mut().map(predict).collect()
                }
            };
            self.clients = clients;

            let outcomes = self.resolve_step(&predictions);
            for (c, (client, outcome)) in self.clients.iter_mut().zip(outcomes).enumerate() {
                client.record(&outcome);
                events[c].push(TokenEvent {
                    round,
                    client: c,
                    timestep: t,
                    outcome,
                });
            }
        }

        let report = self.finish_round(round, &events);
        (report, events.into_iter().flatten().collect())
    }

    fn resolve_step(&mut self, predictions: &[Prediction]) -> Vec<TokenOutcome> {
        let embeddings = &self.embeddings;
        let own: Vec<&Embedding> = predictions
            .iter()
            .map(|p| embeddings.get(p.predicted))
            .collect();
        let topology = &self.cfg.topology;
        let cluster_centroids: Vec<Option<Embedding>> = (0..topology.num_clusters())
            .map(|c| {
                let members: Vec<&Embedding> =
                    topology.members(c).into_iter().map(|k| own[k]).collect();
                centroid(&members).ok()
            })
            .collect();
        let mode = self.mode;
        let peer_cfg = self.cfg.peer;
        let cost = self.cfg.cost;

        let resolve = |client: &mut ClientState| -> TokenOutcome {
            let pred = &predictions[client.id];
            let llm = &pred.llm;
            let mut rng = std::mem::replace(&mut client.rng, crate::rng::seeded(0));
            let outcome = match mode {
                Mode::FedHlm => {
                    let peers: Vec<&Embedding> = topology
                        .members(client.cluster)
                        .into_iter()
                        .filter(|&j| j != client.id)
                        .map(|j| own[j])
                        .collect();
                    let neighbors: Vec<Embedding> = cluster_centroids
                        .iter()
                        .enumerate()
                        .filter(|&(c, _)| c != client.cluster)
                        .filter_map(|(_, e)| e.clone())
                        .collect();
                    let ctx = TokenContext {
                        slm: &pred.slm,
                        llm,
                        predicted: pred.predicted,
                        uncertainty: pred.uncertainty,
                        reference: pred.reference,
                        own: own[client.id],
                        peers,
                        neighbor_centroids: &neighbors,
                        embeddings,
                    };
                    resolve_token(client, &ctx, &peer_cfg, &cost, &mut rng)
                }
                Mode::RandHlm { p_offload } => {
                    let offload = rng.random::<f64>() < p_offload;
                    direct_route(client, pred, llm, offload, &cost, &mut rng)
                }
                Mode::UHlm { static_threshold } => {
                    let transmit = hard_route(
                        crate::uncertainty::UncertaintyScore {
                            value: pred.uncertainty,
                            kind: self.cfg.score,
                        },
                        static_threshold,
                    )
                    .transmit;
                    direct_route(client, pred, llm, transmit, &cost, &mut rng)
                }
            };
            client.rng = rng;
            outcome
        };

        let mut clients = std::mem::take(&mut self.clients);
        let outcomes = if self.cfg.parallel {
            clients.par_iter_mut().map(resolve).collect()
        } else {
            clients.iter_mut().map(resolve).collect()
        };
        self.clients = clients;
        outcomes
    }

    fn finish_round(&mut self, round: u32, events: &[Vec<TokenEvent>]) -> RoundReport {
        let mut counts = StageCounts::default();
        let mut total_cost = 0.0;
        let mut u_sum = 0.0;
        let mut n = 0usize;
        let mut beta_sum = 0.0;
        let mut beta_n = 0usize;
        for e in events.iter().flatten() {
            counts.add(e.outcome.stage);
            total_cost += e.outcome.charged_cost;
            u_sum += e.outcome.uncertainty;
            n += 1;
            if let Some(b) = e.outcome.beta {
                beta_sum += b;
                beta_n += 1;
            }
        }

        let (local_thresholds, aggregation) = match self.mode {
            Mode::FedHlm => {
                let learner = self.cfg.learner;
                let eta = lr_schedule(learner.eta0, round);
                let updated = self.run_parallel(|c| {
                    let grad = loss_gradient(&c.stats.feedback, c.threshold.value, &learner);
                    c.threshold = sgd_step_with(c.threshold, grad, eta, &learner);
                    (c.threshold.value, c.stats.transmitted_count)
                });
                let agg = hierarchical_aggregate(
                    &self.cfg.topology,
                    &updated,
                    &self.cluster_thresholds,
                    round,
                );
                self.cluster_thresholds = agg.cluster_thresholds.clone();
                self.global_threshold = agg.global_threshold;
                for c in &mut self.clients {
                    c.threshold.value = agg.global_threshold;
                }
                (updated.iter().map(|u| u.0).collect(), Some(agg))
            }
            _ => (
                self.clients.iter().map(|c| c.threshold.value).collect(),
                None,
            ),
        };

        RoundReport {
            round,
            per_client: self.clients.iter().map(|c| c.stats.clone()).collect(),
            outcome_counts: counts,
            local_thresholds,
            thresholds_after: self.clients.iter().map(|c| c.threshold.value).collect(),
            global_threshold: self.global_threshold,
            aggregation,
            total_cost,
            avg_uncertainty: u_sum / n.max(1) as f64,
            rejection_rate: if beta_n == 0 {
                0.0
            } else {
                beta_sum / beta_n as f64
            },
        }
    }

    pub fn client_metrics(&self) -> Vec<ClientMetrics> {
        self.clients
            .iter()
            .map(|c| c.metrics(self.cfg.profile.vocab))
            .collect()
    }

    /// Runs every configured round.
    pub fn run(mut self) -> SimulationReport {
        let mut rounds = Vec::with_capacity(self.cfg.rounds as usize);
        let mut events = Vec::with_capacity(self.cfg.tokens_per_client() * self.clients.len());
        for r in 0..self.cfg.rounds {
            let (report, ev) = self.run_round(r);
            rounds.push(report);
            events.extend(ev);
        }
        SimulationReport {
            rounds,
            clients: self.client_metrics(),
            events,
        }
    }
}

/// Baseline routing: keep locally or go straight to the cloud.
fn direct_route(
    client: &mut ClientState,
    pred: &Prediction,
    llm: &TokenDistribution,
    transmit: bool,
    cost: &CostModel,
    rng: &mut SimRng,
) -> TokenOutcome {
    if !transmit {
        return TokenOutcome {
            stage: Stage::Local,
            predicted_token: pred.predicted,
            final_token: pred.predicted,
            charged_cost: 0.0,
            uncertainty: pred.uncertainty,
            correct: pred.predicted == pred.reference,
            beta: None,
            p2p_attempted: false,
            cache_hit: false,
        };
    }
    let verdict = llm_adjudicate(&pred.slm, llm, pred.predicted, rng);
    client.stats.feedback.push(RejectionFeedback {
        beta: verdict.beta,
        token: pred.predicted,
        uncertainty: pred.uncertainty,
    });
    TokenOutcome {
        stage: Stage::Llm,
        predicted_token: pred.predicted,
        final_token: verdict.final_token,
        charged_cost: cost.c_llm,
        uncertainty: pred.uncertainty,
        correct: verdict.final_token == pred.reference,
        beta: Some(verdict.beta),
        p2p_attempted: false,
        cache_hit: false,
    }
}

/// Full FedHLM run (or whichever mode `cfg.mode` names).
pub fn run_simulation(cfg: SimulationConfig) -> Result<SimulationReport, SimError> {
    Ok(Simulation::new(cfg)?.run())
}

/// Rand-HLM or U-HLM run; rejects a FedHLM config.
pub fn run_baseline(cfg: SimulationConfig) -> Result<SimulationReport, SimError> {
    if cfg.mode == ModeKind::FedHlm {
        return Err(SimError::NotABaseline);
    }
    run_simulation(cfg)
}
