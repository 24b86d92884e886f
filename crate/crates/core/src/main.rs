use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedhlm::config::{mode_name, parse_config, parse_config_str, serialize_config, ConfigError};
use fedhlm::cost::{cache_hit_curve, expected_cost, opportunistic_cost, CostModel};
use fedhlm::engine::{ModeKind, SimError, SimulationConfig, SimulationReport, Stage};
use fedhlm::report::{compute_trr, emit_metrics_csv, emit_trace, ReportError};

#[derive(Parser)]
#[command(
    name = "fedhlm",
    version,
    about = "Federated hybrid language model routing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where metrics.csv, trace.jsonl and config.toml are written.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fedhlm,
    Rand,
    Uhlm,
}

impl From<ModeArg> for ModeKind {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fedhlm => ModeKind::FedHlm,
            ModeArg::Rand => ModeKind::RandHlm,
            ModeArg::Uhlm => ModeKind::UHlm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    /// Dirichlet concentration of the client partition.
    Alpha,
    /// c_p2p / c_llm with c_llm held fixed.
    CostRatio,
}

#[derive(Subcommand)]
enum Command {
    /// Full simulation.
    Run(Common),
    /// Rand-HLM or U-HLM baseline (defaults to uhlm).
    Baseline(Common),
    /// Repeat the simulation over a grid of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "alpha")]
        param: SweepParam,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 1.0, 0.1])]
        values: Vec<f64>,
    },
    /// Analytic expected-cost and cache-curve tables.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Cache curve rate for the hit-ratio table.
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ConfigInvalid(_) | SimError::Trace(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(common: &Common) -> Result<SimulationConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => parse_config_str("")?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = common.mode {
        cfg.mode = m.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_outputs(
    dir: &Path,
    cfg: &SimulationConfig,
    report: &SimulationReport,
) -> Result<(), Failure> {
    create_dir(dir)?;
    write_text(&dir.join("config.toml"), &serialize_config(cfg))?;
    emit_metrics_csv(&report.rounds, &dir.join("metrics.csv"))?;
    emit_trace(&report.events, &dir.join("trace.jsonl"))?;
    let mut clients =
        String::from("client,token_entropy,cache_hit_ratio,llm_token_count,accuracy\n");
    for c in &report.clients {
        let _ = writeln!(
            clients,
            "{},{:.6},{:.6},{},{:.6}",
            c.client, c.token_entropy, c.cache_hit_ratio, c.llm_token_count, c.accuracy
        );
    }
    write_text(&dir.join("clients.csv"), &clients)
}

fn summary(cfg: &SimulationConfig, report: &SimulationReport) -> String {
    let t = report.totals();
    format!(
        "mode={} tokens={} local={} p2p={} edge={} llm={} trr={:.6} cost={:.6} threshold={:.6}",
        mode_name(cfg.mode),
        t.total(),
        t.local,
        t.p2p,
        t.edge,
        t.llm,
        compute_trr(report),
        report.total_cost(),
        report.final_threshold()
    )
}

fn run(common: &Common, baseline: bool) -> Result<(), Failure> {
    let mut cfg = load(common)?;
    if baseline && cfg.mode == ModeKind::FedHlm {
        cfg.mode = if common.mode.is_some() {
            return Err(Failure::Config("baseline needs --mode rand or uhlm".into()));
        } else {
            ModeKind::UHlm
        };
    }
    let report = if baseline {
        fedhlm::run_baseline(cfg.clone())?
    } else {
        fedhlm::run_simulation(cfg.clone())?
    };
    write_outputs(&common.out_dir, &cfg, &report)?;
    println!("{}", summary(&cfg, &report));
    Ok(())
}

fn sweep(common: &Common, param: SweepParam, values: &[f64]) -> Result<(), Failure> {
    let base = load(common)?;
    create_dir(&common.out_dir)?;
    let (name, column) = match param {
        SweepParam::Alpha => ("alpha", "dirichlet_alpha"),
        SweepParam::CostRatio => ("ratio", "cost_ratio"),
    };
    let mut table =
        format!("{column},local_fraction,p2p_fraction,edge_fraction,llm_fraction,trr,total_cost\n");
    for &v in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::Alpha => cfg.partition.dirichlet_alpha = v,
            SweepParam::CostRatio => cfg.cost.c_p2p = v * cfg.cost.c_llm,
        }
        cfg.validate()?;
        let report = fedhlm::run_simulation(cfg.clone())?;
        write_outputs(&common.out_dir.join(format!("{name}_{v}")), &cfg, &report)?;
        let t = report.totals();
        let _ = writeln!(
            table,
            "{v},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            t.fraction(Stage::Local),
            t.fraction(Stage::PeerP2P),
            t.fraction(Stage::Edge),
            t.fraction(Stage::Llm),
            compute_trr(&report),
            report.total_cost()
        );
        println!("{column}={v} {}", summary(&cfg, &report));
    }
    write_text(&common.out_dir.join("sweep.csv"), &table)
}

fn cost_tables(common: &Common, alpha: f64) -> Result<(), Failure> {
    let cfg = load(common)?;
    create_dir(&common.out_dir)?;
    let mut policy = String::from("cost_ratio,p_hit,always_p2p,never_p2p,opportunistic\n");
    for ratio in [0.1, 0.25, 0.5, 0.9] {
        let model = CostModel {
            c_p2p: ratio * cfg.cost.c_llm,
            ..cfg.cost
        };
        for i in 0..=20 {
            let p = f64::from(i) / 20.0;
            let _ = writeln!(
                policy,
                "{ratio},{p:.2},{:.6},{:.6},{:.6}",
                expected_cost(p, &model),
                model.c_llm,
                opportunistic_cost(p, &model)
            );
        }
    }
    write_text(&common.out_dir.join("cost_policy.csv"), &policy)?;
    let mut cache = String::from("cache_size,hit_ratio\n");
    let mut s = 8;
    while s <= 512 {
        let _ = writeln!(cache, "{s},{:.6}", cache_hit_curve(s, alpha));
        s *= 2;
    }
    write_text(&common.out_dir.join("cache_curve.csv"), &cache)?;
    print!("{policy}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c, false),
        Command::Baseline(c) => run(c, true),
        Command::Sweep {
            common,
            param,
            values,
        } => sweep(common, *param, values),
        Command::Cost { common, alpha } => cost_tables(common, *alpha),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
