//! Flat `section.key = value` configuration files.
//!
//! The syntax is TOML restricted to dotted keys; section headers also work
//! since they flatten to the same keys. Any key not set keeps its default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::Value;

use crate::engine::{ModeKind, SimulationConfig};
use crate::federation::ClusterTopology;
use crate::model_source::VocabSpec;
use crate::uncertainty::UncertaintyKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {0} not found")]
    MissingFile(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("invalid value for {0}")]
    InvalidValue(String),
}

impl ConfigError {
    fn invalid(key: &str) -> Self {
        ConfigError::InvalidValue(key.to_string())
    }
}

pub fn parse_config(path: &Path) -> Result<SimulationConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ConfigError::MissingFile(path.to_path_buf())
        } else {
            ConfigError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<SimulationConfig, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Syntax(e.message().to_string()))?;
    let mut flat = BTreeMap::new();
    flatten("", &table, &mut flat);
    from_flat(&flat)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(f) if f.is_finite() => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(ConfigError::invalid(key)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(ConfigError::invalid(key)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| ConfigError::invalid(key))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, ConfigError> {
    v.as_str().ok_or_else(|| ConfigError::invalid(key))
}

fn check(key: &str, ok: bool) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::invalid(key))
    }
}

fn unit(key: &str, v: f64) -> Result<f64, ConfigError> {
    check(key, (0.0..=1.0).contains(&v)).map(|_| v)
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    check(key, v > 0.0).map(|_| v)
}

fn non_negative(key: &str, v: f64) -> Result<f64, ConfigError> {
    check(key, v >= 0.0).map(|_| v)
}

pub fn parse_mode(s: &str) -> Option<ModeKind> {
    match s.to_ascii_lowercase().as_str() {
        "fedhlm" => Some(ModeKind::FedHlm),
        "rand" | "randhlm" | "rand-hlm" => Some(ModeKind::RandHlm),
        "uhlm" | "u-hlm" => Some(ModeKind::UHlm),
        _ => None,
    }
}

pub fn mode_name(mode: ModeKind) -> &'static str {
    match mode {
        ModeKind::FedHlm => "fedhlm",
        ModeKind::RandHlm => "rand",
        ModeKind::UHlm => "uhlm",
    }
}

fn score_name(kind: UncertaintyKind) -> &'static str {
    match kind {
        UncertaintyKind::Entropy => "entropy",
        UncertaintyKind::McDisagreement => "mc",
    }
}

fn from_flat(flat: &BTreeMap<String, Value>) -> Result<SimulationConfig, ConfigError> {
    let mut cfg = SimulationConfig::default();
    let mut num_clients = cfg.topology.num_clients();
    let mut num_clusters = cfg.topology.num_clusters();
    let mut assignment: Option<Vec<usize>> = None;

    for (key, v) in flat {
        let k = key.as_str();
        match k {
            "seed" => {
                cfg.seed = match v {
                    Value::Integer(i) => *i as u64,
                    Value::String(s) => s.parse().map_err(|_| ConfigError::invalid(k))?,
                    _ => return Err(ConfigError::invalid(k)),
                }
            }
            "rounds" => {
                let r = as_usize(k, v)?;
                check(k, r >= 1 && r <= u32::MAX as usize)?;
                cfg.rounds = r as u32;
            }
            "tokens_per_client_per_round" => {
                cfg.tokens_per_client_per_round = as_usize(k, v)?;
                check(k, cfg.tokens_per_client_per_round >= 1)?;
            }
            "initial_threshold" => cfg.initial_threshold = unit(k, as_f64(k, v)?)?,
            "mode" => {
                cfg.mode = parse_mode(as_str(k, v)?).ok_or_else(|| ConfigError::invalid(k))?
            }
            "parallel" => cfg.parallel = as_bool(k, v)?,

            "uncertainty.score" => {
                cfg.score = match as_str(k, v)? {
                    "mc" | "mc_disagreement" => UncertaintyKind::McDisagreement,
                    "entropy" => UncertaintyKind::Entropy,
                    _ => return Err(ConfigError::invalid(k)),
                }
            }
            "uncertainty.num_samples" => {
                cfg.sampler.num_samples = as_usize(k, v)?;
                check(k, cfg.sampler.num_samples >= 1)?;
            }
            "uncertainty.temperature" => {
                cfg.sampler.temperature = as_f64(k, v)?;
                check(k, cfg.sampler.temperature > 1.0)?;
            }

            "topology.num_clients" => {
                num_clients = as_usize(k, v)?;
                check(k, num_clients >= 1)?;
            }
            "topology.num_clusters" => {
                num_clusters = as_usize(k, v)?;
                check(k, num_clusters >= 1)?;
            }
            "topology.assignment" => {
                let arr = v.as_array().ok_or_else(|| ConfigError::invalid(k))?;
                assignment = Some(
                    arr.iter()
                        .map(|x| as_usize(k, x))
                        .collect::<Result<_, _>>()?,
                );
            }

            "partition.dirichlet_alpha" => {
                cfg.partition.dirichlet_alpha = positive(k, as_f64(k, v)?)?
            }
            "partition.num_classes" => {
                cfg.partition.num_classes = as_usize(k, v)?;
                check(k, cfg.partition.num_classes >= 1)?;
            }

            "model.vocab_size" => {
                cfg.profile.vocab =
                    VocabSpec::new(as_usize(k, v)?).map_err(|_| ConfigError::invalid(k))?
            }
            "model.agreement" => cfg.profile.agreement = unit(k, as_f64(k, v)?)?,
            "model.slm_sharpness" => cfg.profile.slm_sharpness = positive(k, as_f64(k, v)?)?,
            "model.llm_sharpness" => cfg.profile.llm_sharpness = positive(k, as_f64(k, v)?)?,

            "workload.zipf_exponent" => {
                cfg.workload.zipf_exponent = non_negative(k, as_f64(k, v)?)?
            }
            "workload.skew_sensitivity" => cfg.workload.skew_sensitivity = unit(k, as_f64(k, v)?)?,
            "workload.shared_prompt_prob" => {
                cfg.workload.shared_prompt_prob = unit(k, as_f64(k, v)?)?
            }
            "workload.trace_path" => cfg.workload.trace_path = Some(PathBuf::from(as_str(k, v)?)),

            "learner.gamma" => cfg.learner.gamma = positive(k, as_f64(k, v)?)?,
            "learner.lambda" => cfg.learner.lambda = non_negative(k, as_f64(k, v)?)?,
            "learner.eta0" => cfg.learner.eta0 = positive(k, as_f64(k, v)?)?,

            "peer.similarity_threshold" => cfg.peer.similarity_threshold = unit(k, as_f64(k, v)?)?,
            "peer.edge_similarity_threshold" => {
                cfg.peer.edge_similarity_threshold = unit(k, as_f64(k, v)?)?
            }
            "peer.embedding_dim" => {
                cfg.peer.embedding_dim = as_usize(k, v)?;
                check(k, cfg.peer.embedding_dim >= 1)?;
            }
            "peer.cache_capacity" => {
                cfg.peer.cache_capacity = as_usize(k, v)?;
                check(k, cfg.peer.cache_capacity >= 1)?;
            }

            "cost.c_p2p" => cfg.cost.c_p2p = non_negative(k, as_f64(k, v)?)?,
            "cost.c_llm" => cfg.cost.c_llm = positive(k, as_f64(k, v)?)?,
            "cost.c_uplink" => cfg.cost.c_uplink = non_negative(k, as_f64(k, v)?)?,
            "cost.tau_slm" => cfg.cost.tau_slm = non_negative(k, as_f64(k, v)?)?,
            "cost.tau_llm" => cfg.cost.tau_llm = non_negative(k, as_f64(k, v)?)?,
            "cost.tau_uplink" => cfg.cost.tau_uplink = non_negative(k, as_f64(k, v)?)?,
            "cost.p_hit_window" => {
                cfg.p_hit_window = as_usize(k, v)?;
                check(k, cfg.p_hit_window >= 1)?;
            }
            "cost.p_hit_prior" => cfg.p_hit_prior = unit(k, as_f64(k, v)?)?,

            "baseline.p_offload" => cfg.baseline.p_offload = unit(k, as_f64(k, v)?)?,
            "baseline.static_threshold" => {
                cfg.baseline.static_threshold = Some(unit(k, as_f64(k, v)?)?)
            }

            _ => return Err(ConfigError::UnknownKey(key.clone())),
        }
    }

    cfg.topology = match assignment {
        Some(a) => {
            check(
                "topology.num_clients",
                !flat.contains_key("topology.num_clients") || a.len() == num_clients,
            )?;
            ClusterTopology::with_assignment(a, num_clusters)
                .map_err(|_| ConfigError::invalid("topology.assignment"))?
        }
        None => ClusterTopology::contiguous(num_clients, num_clusters)
            .map_err(|_| ConfigError::invalid("topology.num_clusters"))?,
    };
    check(
        "partition.num_classes",
        cfg.partition.num_classes <= cfg.profile.vocab.size(),
    )?;
    cfg.validate()
        .map_err(|e| ConfigError::InvalidValue(e.to_string()))?;
    Ok(cfg)
}

/// Writes every key, defaults included, in a form `parse_config_str` reads back.
pub fn serialize_config(cfg: &SimulationConfig) -> String {
    fn real(v: f64) -> String {
        // `{:?}` keeps a decimal point and round-trips exactly
        format!("{v:?}")
    }
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    line("seed", cfg.seed.to_string());
    line("rounds", cfg.rounds.to_string());
    line(
        "tokens_per_client_per_round",
        cfg.tokens_per_client_per_round.to_string(),
    );
    line("initial_threshold", real(cfg.initial_threshold));
    line("mode", format!("\"{}\"", mode_name(cfg.mode)));
    line("parallel", cfg.parallel.to_string());
    line(
        "uncertainty.score",
        format!("\"{}\"", score_name(cfg.score)),
    );
    line(
        "uncertainty.num_samples",
        cfg.sampler.num_samples.to_string(),
    );
    line("uncertainty.temperature", real(cfg.sampler.temperature));
    line(
        "topology.num_clients",
        cfg.topology.num_clients().to_string(),
    );
    line(
        "topology.num_clusters",
        cfg.topology.num_clusters().to_string(),
    );
    let assignment: Vec<String> = cfg
        .topology
        .assignment()
        .iter()
        .map(|c| c.to_string())
        .collect();
    line(
        "topology.assignment",
        format!("[{}]", assignment.join(", ")),
    );
    line(
        "partition.dirichlet_alpha",
        real(cfg.partition.dirichlet_alpha),
    );
    line(
        "partition.num_classes",
        cfg.partition.num_classes.to_string(),
    );
    line("model.vocab_size", cfg.profile.vocab.size().to_string());
    line("model.agreement", real(cfg.profile.agreement));
    line("model.slm_sharpness", real(cfg.profile.slm_sharpness));
    line("model.llm_sharpness", real(cfg.profile.llm_sharpness));
    line("workload.zipf_exponent", real(cfg.workload.zipf_exponent));
    line(
        "workload.skew_sensitivity",
        real(cfg.workload.skew_sensitivity),
    );
    line(
        "workload.shared_prompt_prob",
        real(cfg.workload.shared_prompt_prob),
    );
    if let Some(p) = &cfg.workload.trace_path {
        line(
            "workload.trace_path",
            Value::String(p.display().to_string()).to_string(),
        );
    }
    line("learner.gamma", real(cfg.learner.gamma));
    line("learner.lambda", real(cfg.learner.lambda));
    line("learner.eta0", real(cfg.learner.eta0));
    line(
        "peer.similarity_threshold",
        real(cfg.peer.similarity_threshold),
    );
    line(
        "peer.edge_similarity_threshold",
        real(cfg.peer.edge_similarity_threshold),
    );
    line("peer.embedding_dim", cfg.peer.embedding_dim.to_string());
    line("peer.cache_capacity", cfg.peer.cache_capacity.to_string());
    line("cost.c_p2p", real(cfg.cost.c_p2p));
    line("cost.c_llm", real(cfg.cost.c_llm));
    line("cost.c_uplink", real(cfg.cost.c_uplink));
    line("cost.tau_slm", real(cfg.cost.tau_slm));
    line("cost.tau_llm", real(cfg.cost.tau_llm));
    line("cost.tau_uplink", real(cfg.cost.tau_uplink));
    line("cost.p_hit_window", cfg.p_hit_window.to_string());
    line("cost.p_hit_prior", real(cfg.p_hit_prior));
    line("baseline.p_offload", real(cfg.baseline.p_offload));
    if let Some(t) = cfg.baseline.static_threshold {
        line("baseline.static_threshold", real(t));
    }
    s
}
