//! Per-round metrics CSV and per-token JSONL trace.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::engine::{RoundReport, SimulationReport, TokenEvent};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub const METRICS_HEADER: &str = "round,global_threshold,local_count,p2p_count,edge_count,\
llm_count,transmission_rate,avg_uncertainty,rejection_rate,total_cost,trr";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u32,
    pub global_threshold: f64,
    pub local_count: u64,
    pub p2p_count: u64,
    pub edge_count: u64,
    pub llm_count: u64,
    /// Fraction of tokens that left the client.
    pub transmission_rate: f64,
    pub avg_uncertainty: f64,
    pub rejection_rate: f64,
    pub total_cost: f64,
    pub trr: f64,
}

impl MetricsRow {
    pub fn from_round(r: &RoundReport) -> Self {
        let c = r.outcome_counts;
        let total = c.total().max(1) as f64;
        Self {
            round: r.round,
            global_threshold: r.global_threshold,
            local_count: c.local,
            p2p_count: c.p2p,
            edge_count: c.edge,
            llm_count: c.llm,
            transmission_rate: (c.p2p + c.edge + c.llm) as f64 / total,
            avg_uncertainty: r.avg_uncertainty,
            rejection_rate: r.rejection_rate,
            total_cost: r.total_cost,
            trr: trr_from_counts(c.llm, c.total()),
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.round,
            self.global_threshold,
            self.local_count,
            self.p2p_count,
            self.edge_count,
            self.llm_count,
            self.transmission_rate,
            self.avg_uncertainty,
            self.rejection_rate,
            self.total_cost,
            self.trr
        )
    }
}

fn trr_from_counts(llm: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        1.0 - llm as f64 / total as f64
    }
}

/// Share of tokens resolved without the cloud LLM.
pub fn compute_trr(report: &SimulationReport) -> f64 {
    let c = report.totals();
    trr_from_counts(c.llm, c.total())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn metrics_csv(reports: &[RoundReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&MetricsRow::from_round(r).to_csv());
        s.push('\n');
    }
    s
}

pub fn emit_metrics_csv(reports: &[RoundReport], path: &Path) -> Result<(), ReportError> {
    std::fs::write(path, metrics_csv(reports)).map_err(io_err(path))
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    round: u32,
    client: usize,
    timestep: usize,
    stage: &'a str,
    uncertainty: f64,
    beta: Option<f64>,
    cost: f64,
    correct: bool,
}

pub fn trace_line(e: &TokenEvent) -> String {
    serde_json::to_string(&TraceRecord {
        round: e.round,
        client: e.client,
        timestep: e.timestep,
        stage: e.outcome.stage.as_str(),
        uncertainty: e.outcome.uncertainty,
        beta: e.outcome.beta,
        cost: e.outcome.charged_cost,
        correct: e.outcome.correct,
    })
    .expect("plain record serializes")
}

/// One JSON object per line, sorted by round, client, timestep.
pub fn emit_trace(events: &[TokenEvent], path: &Path) -> Result<(), ReportError> {
    let mut sorted: Vec<&TokenEvent> = events.iter().collect();
    sorted.sort_by_key(|e| (e.round, e.client, e.timestep));
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for e in sorted {
        writeln!(w, "{}", trace_line(e)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Stage, StageCounts, TokenOutcome};

    fn round(local: u64, llm: u64) -> RoundReport {
        RoundReport {
            round: 0,
            per_client: vec![],
            outcome_counts: StageCounts {
                local,
                p2p: 0,
                edge: 0,
                llm,
            },
            local_thresholds: vec![],
            thresholds_after: vec![],
            global_threshold: 0.5,
            aggregation: None,
            total_cost: llm as f64 * 10.0,
            avg_uncertainty: 0.25,
            rejection_rate: 0.0,
        }
    }

    fn report(local: u64, llm: u64) -> SimulationReport {
        SimulationReport {
            rounds: vec![round(local, llm)],
            clients: vec![],
            events: vec![],
        }
    }

    #[test]
    fn trr_examples() {
        assert_eq!(compute_trr(&report(10, 0)), 1.0);
        assert_eq!(compute_trr(&report(0, 10)), 0.0);
        assert!((compute_trr(&report(18_000 - 708, 708)) - 0.9607).abs() < 1e-4);
    }

    #[test]
    fn csv_shape() {
        let csv = metrics_csv(&[round(3, 1), round(4, 0)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        let cols = lines[0].split(',').count();
        assert_eq!(cols, 11);
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), cols);
        }
        assert_eq!(
            lines[1],
            "0,0.500000,3,0,0,1,0.250000,0.250000,0.000000,10.000000,0.750000"
        );
    }

    #[test]
    fn trace_beta_null_for_non_llm() {
        let mut outcome = TokenOutcome {
            stage: Stage::Local,
            predicted_token: 1,
            final_token: 1,
            charged_cost: 0.0,
            uncertainty: 0.1,
            correct: true,
            beta: None,
            p2p_attempted: false,
            cache_hit: false,
        };
        let e = TokenEvent {
            round: 1,
            client: 2,
            timestep: 3,
            outcome,
        };
        assert_eq!(
            trace_line(&e),
            r#"{"round":1,"client":2,"timestep":3,"stage":"Local","uncertainty":0.1,"beta":null,"cost":0.0,"correct":true}"#
        );
        outcome.stage = Stage::Llm;
        outcome.beta = Some(0.25);
        let line = trace_line(&TokenEvent { outcome, ..e });
        assert!(line.contains(r#""stage":"LLM""#) && line.contains(r#""beta":0.25"#));
    }
}
