//! Operator surface for the private group-by pipeline.
//!
//! `plan` and `simulate` are read-only analyses; `run` executes the full
//! budget-consuming release under ledger control; `attack-demo` reproduces
//! the Sybil experiment motivating DP tuning.

mod analysis;
mod pipeline;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dpgroup",
    version,
    about = "Differentially private group-by aggregation with autotuned contribution bounds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a query and print missing bounds plus the sampling plan; no
    /// budgets are consumed.
    Plan(PlanArgs),
    /// Execute parse, ingest, autotune, aggregate, and release one report.
    Run(RunArgs),
    /// Monte-Carlo scenario driver; writes CSV to stdout.
    Simulate(SimulateArgs),
    /// Measure how often a Sybil adversary recovers one unit's secret bit
    /// from tuned parameters.
    AttackDemo(AttackDemoArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Query file.
    #[arg(long)]
    query: PathBuf,
    /// Upload data, JSON lines by default or CSV with --data-map.
    #[arg(long)]
    data: PathBuf,
    /// Column mapping (JSON) for CSV data files.
    #[arg(long)]
    data_map: Option<PathBuf>,
    /// Closed-set group domain file (tab-separated key tuples).
    #[arg(long)]
    domain: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Column mapping (JSON) for CSV data files.
    #[arg(long)]
    data_map: Option<PathBuf>,
    /// Closed-set group domain file (tab-separated key tuples).
    #[arg(long)]
    domain: Option<PathBuf>,
    /// Access policy document (JSON).
    #[arg(long)]
    policy: PathBuf,
    /// Budget ledger path; created when absent.
    #[arg(long, env = "DPGROUP_LEDGER")]
    ledger: PathBuf,
    /// Master seed; omitted draws a fresh one and echoes it in the report.
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination, written atomically after the ledger commit.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
    /// Leaf aggregation threads; the release is identical for any count.
    #[arg(long, default_value_t = 1)]
    shards: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scenario: Scenario,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    /// Population size for representativeness and k-sweep scenarios.
    #[arg(long, default_value_t = 200_000)]
    n: u64,
    #[arg(long, value_enum, default_value_t = DataDistribution::Lognormal)]
    distribution: DataDistribution,
    #[arg(long, default_value_t = 83)]
    k: u32,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0 / 30.0)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    /// Private quantile vs the sample's 5-approximation window.
    QuantileAccuracy,
    /// Tuned value vs the population's 10-approximation window.
    Representativeness,
    /// Frequency of quantile walks containing an outsized noise draw.
    NoiseBound,
    /// Sample complexity n*q as a function of the percentile k.
    KSweep,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataDistribution {
    Lognormal,
    Uniform,
    Pareto,
}

#[derive(Args)]
struct AttackDemoArgs {
    #[arg(long, value_enum)]
    mode: AttackModeArg,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackModeArg {
    Deterministic,
    Dp,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(args) => analysis::cmd_plan(&args),
        Command::Run(args) => pipeline::cmd_run(&args),
        Command::Simulate(args) => analysis::cmd_simulate(&args),
        Command::AttackDemo(args) => analysis::cmd_attack_demo(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
