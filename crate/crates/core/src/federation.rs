//! Client/cluster topology, non-IID partitioning and two-level threshold
//! aggregation.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_source::{TokenId, VocabSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("need at least one client and one cluster")]
    Empty,
    #[error("{clusters} clusters cannot all be non-empty with {clients} clients")]
    TooManyClusters { clients: usize, clusters: usize },
    #[error("assignment has {found} entries for {expected} clients")]
    AssignmentLength { expected: usize, found: usize },
    #[error("client {client} assigned to cluster {cluster}, outside 0..{clusters}")]
    ClusterOutOfRange {
        client: usize,
        cluster: usize,
        clusters: usize,
    },
    #[error("cluster {0} has no clients")]
    EmptyCluster(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("no client transmitted a token this round")]
    AllWeightsZero,
    #[error("nothing to aggregate")]
    NoClusters,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("dirichlet_alpha must be positive, got {0}")]
    Alpha(f64),
    #[error("num_classes must be at least 1")]
    NoClasses,
}

/// Static assignment of clients to clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTopology {
    num_clients: usize,
    num_clusters: usize,
    assignment: Vec<usize>,
}

impl ClusterTopology {
    /// Contiguous blocks: client `k` joins cluster `k * M / K`.
    pub fn contiguous(num_clients: usize, num_clusters: usize) -> Result<Self, TopologyError> {
        if num_clients == 0 || num_clusters == 0 {
            return Err(TopologyError::Empty);
        }
        let assignment = (0..num_clients)
            .map(|k| k * num_clusters / num_clients)
            .collect();
        Self::with_assignment(assignment, num_clusters)
    }

    pub fn with_assignment(
        assignment: Vec<usize>,
        num_clusters: usize,
    ) -> Result<Self, TopologyError> {
        let num_clients = assignment.len();
        if num_clients == 0 || num_clusters == 0 {
            return Err(TopologyError::Empty);
        }
        if num_clusters > num_clients {
            return Err(TopologyError::TooManyClusters {
                clients: num_clients,
                clusters: num_clusters,
            });
        }
        let mut sizes = vec![0usize; num_clusters];
        for (client, &cluster) in assignment.iter().enumerate() {
            if cluster >= num_clusters {
                return Err(TopologyError::ClusterOutOfRange {
                    client,
                    cluster,
                    clusters: num_clusters,
                });
            }
            sizes[cluster] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&n| n == 0) {
            return Err(TopologyError::EmptyCluster(empty));
        }
        Ok(Self {
            num_clients,
            num_clusters,
            assignment,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, client: usize) -> usize {
        self.assignment[client]
    }

    /// Client ids in `cluster`, ascending.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.num_clients)
            .filter(|&k| self.assignment[k] == cluster)
            .collect()
    }
}

/// Non-IID workload parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Dirichlet concentration; smaller is more skewed.
    pub dirichlet_alpha: f64,
    pub num_classes: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            dirichlet_alpha: 10.0,
            num_classes: 4,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), PartitionError> {
        if !(self.dirichlet_alpha.is_finite() && self.dirichlet_alpha > 0.0) {
            return Err(PartitionError::Alpha(self.dirichlet_alpha));
        }
        if self.num_classes == 0 {
            return Err(PartitionError::NoClasses);
        }
        Ok(())
    }
}

/// One `Dirichlet(α·1)` class mixture per client, indexed by client id.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    spec: &PartitionSpec,
    topology: &ClusterTopology,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let gamma = Gamma::new(spec.dirichlet_alpha, 1.0).expect("alpha validated");
    (0..topology.num_clients())
        .map(|_| {
            let draws: Vec<f64> = (0..spec.num_classes).map(|_| gamma.sample(rng)).collect();
            let sum: f64 = draws.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                draws.into_iter().map(|g| g / sum).collect()
            } else {
                // every gamma underflowed; all mass on one class
                let mut one_hot = vec![0.0; spec.num_classes];
                one_hot[rng.random_range(0..spec.num_classes)] = 1.0;
                one_hot
            }
        })
        .collect()
}

/// Sums in ascending order so the result does not depend on input order.
fn canonical_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = terms.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Sample-weighted mean `Σ n_k u_k / Σ n_k`.
pub fn cluster_aggregate(thresholds: &[(f64, u64)]) -> Result<f64, AggregateError> {
    let total: u64 = thresholds.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return Err(AggregateError::AllWeightsZero);
    }
    let weighted = canonical_sum(thresholds.iter().map(|&(u, n)| u * n as f64));
    Ok(weighted / total as f64)
}

/// Unweighted mean over clusters.
pub fn global_aggregate(cluster_thresholds: &[f64]) -> Result<f64, AggregateError> {
    if cluster_thresholds.is_empty() {
        return Err(AggregateError::NoClusters);
    }
    Ok(canonical_sum(cluster_thresholds.iter().copied()) / cluster_thresholds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub cluster_thresholds: Vec<f64>,
    pub global_threshold: f64,
    pub round: u32,
    /// Clusters that fell back to their previous threshold.
    pub idle_clusters: Vec<usize>,
}

/// Cluster-then-global aggregation for one round.
///
/// `updates[k]` is client `k`'s post-update threshold and transmitted count.
/// A cluster whose clients all transmitted nothing keeps
/// `previous_cluster[c]`.
pub fn hierarchical_aggregate(
    topology: &ClusterTopology,
    updates: &[(f64, u64)],
    previous_cluster: &[f64],
    round: u32,
) -> AggregationReport {
    let mut idle_clusters = Vec::new();
    let cluster_thresholds: Vec<f64> = (0..topology.num_clusters())
        .map(|c| {
            let members: Vec<(f64, u64)> = topology
                .members(c)
                .into_iter()
                .map(|k| updates[k])
                .collect();
            cluster_aggregate(&members).unwrap_or_else(|_| {
                idle_clusters.push(c);
                previous_cluster[c]
            })
        })
        .collect();
    let global_threshold =
        global_aggregate(&cluster_thresholds).expect("topology has at least one cluster");
    AggregationReport {
        cluster_thresholds,
        global_threshold,
        round,
        idle_clusters,
    }
}

/// Disjoint vocabulary regions, one per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassLayout {
    vocab: usize,
    classes: usize,
}

impl ClassLayout {
    /// Requires `vocab.size() >= num_classes`.
    pub fn new(vocab: VocabSpec, num_classes: usize) -> Option<Self> {
        (num_classes >= 1 && vocab.size() >= num_classes).then_some(Self {
            vocab: vocab.size(),
            classes: num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// Token range owned by `class`.
    pub fn region(&self, class: usize) -> std::ops::Range<TokenId> {
        let start = class * self.vocab / self.classes;
        let end = (class + 1) * self.vocab / self.classes;
        start..end
    }

    pub fn class_of(&self, token: TokenId) -> usize {
        (0..self.classes)
            .find(|&c| self.region(c).contains(&token))
            .expect("token within vocabulary")
    }
}

/// How well a client's model covers `class`, given its mixture.
///
/// A client holding at least the population share `1/C` of a class is fully
/// competent on it; below that, competence falls off linearly. `sensitivity`
/// blends between no effect (0) and the full effect (1).
pub fn class_competence(mixture: &[f64], class: usize, sensitivity: f64) -> f64 {
    let share = (mixture[class] * mixture.len() as f64).min(1.0);
    1.0 - sensitivity + sensitivity * share
}
