use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Rubric-aligned automated scoring: score datasets, evaluate runs and
/// build comparison reports.
#[derive(Debug, Parser)]
#[command(name = "rubricscore", version, about, long_about = None)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug). Logs go to stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every response of a registered item.
    Score(ScoreArgs),
    /// Compute agreement metrics for runs; pairs of baseline and autoscore
    /// runs on the same item and model also get a comparison table.
    Evaluate(EvaluateArgs),
    /// Compare extracted components of an autoscore run with gold annotations.
    ValidateComponents(ValidateArgs),
    /// Write mean time per response and QWK for each run as CSV.
    Tradeoff(TradeoffArgs),
    /// Render the audit record of one response scored by both variants.
    Case(CaseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Autoscore,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Remote,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImputeArg {
    /// Leave failed responses out of the metrics.
    Fail,
    /// Score failed responses as the lowest score point.
    Floor,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Registered item id.
    #[arg(long)]
    pub item: String,
    /// Two-agent scoring or the single-call baseline.
    #[arg(long, value_enum, default_value = "autoscore")]
    pub mode: ModeArg,
    /// Completion backend; defaults to `backend.kind` from the config.
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Concurrent responses; overrides `run.parallelism`.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Model name; overrides `backend.model_name`.
    #[arg(long)]
    pub model: Option<String>,
    /// Re-prompts per agent call; overrides `run.max_retries`.
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Score a seeded sample of this fraction of the dataset.
    #[arg(long)]
    pub sample_fraction: Option<f64>,
    /// Sampling seed; overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `<run.out_dir>/<item>-<mode>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue the run in --out, skipping responses already scored.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory; repeat for several runs.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Directory for metric reports and comparison tables.
    #[arg(long)]
    pub out: PathBuf,
    /// How failed responses enter the metrics.
    #[arg(long, value_enum, default_value = "fail")]
    pub impute: ImputeArg,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Autoscore run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Gold annotations, one {"response_id", "values"} object per line.
    #[arg(long)]
    pub gold: PathBuf,
    /// Evaluate a seeded sample of this fraction of the scored responses
    /// instead of all of them.
    #[arg(long)]
    pub sample_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TradeoffArgs {
    /// Run directory; repeat for several runs.
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,
    /// CSV output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaseArgs {
    #[arg(long)]
    pub run_autoscore: PathBuf,
    #[arg(long)]
    pub run_baseline: PathBuf,
    /// Response id.
    #[arg(long)]
    pub id: String,
    /// Directory to write case_<id>.md into; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
