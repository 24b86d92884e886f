//! Federated, uncertainty-gated token routing between small on-device
//! models, their peers, edge aggregators and a cloud LLM.
//!
//! Clients keep confident tokens, try to settle uncertain ones with peers
//! or the edge, and only then pay for the cloud. Each client learns its
//! uncertainty threshold from the cloud's rejections, and thresholds are
//! averaged per cluster and then globally every round.

pub mod adjudicate;
pub mod config;
pub mod cost;
pub mod engine;
pub mod federation;
pub mod model_source;
pub mod peer;
pub mod report;
pub mod rng;
pub mod threshold;
pub mod uncertainty;

pub use config::{parse_config, ConfigError};
pub use engine::{
    run_baseline, run_simulation, Simulation, SimulationConfig, SimulationReport, Stage,
};
pub use report::{compute_trr, emit_metrics_csv, emit_trace};
