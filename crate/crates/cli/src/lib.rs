//! `mrnn` command-line front end: dataset ingestion, training, evaluation,
//! ranking, attention export and gradient checks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod heatmap;
pub mod ingest;
pub mod synth;

/// Environment variable capping the worker threads used for parallel scoring.
pub const THREADS_ENV: &str = "MRNN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mrnn", version, about = "Multi-resolution neural ranking with duplex attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw candidate lists into the canonical JSON-lines dataset.
    Ingest(IngestArgs),
    /// Train from a fresh initialization; writes model.ckpt and metrics.csv.
    Train(TrainArgs),
    /// Rank a subset and write a metrics report as JSON.
    Evaluate(EvalArgs),
    /// Write per-query ranked candidate lists as JSON lines.
    Rank(EvalArgs),
    /// Write attention heatmaps for one query-document pair.
    ExportAttention(ExportArgs),
    /// Finite-difference check of every primitive and a tiny network.
    Gradcheck(GradArgs),
    /// Generate a synthetic dataset, embedding bundle and config.
    Synth(SynthArgs),
    /// Print a config holding the published hyperparameters of a benchmark.
    InitConfig(InitArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// wikiqa, trecqa (any tab-separated file with named columns) or jsonl.
    #[arg(long)]
    pub format: String,
    /// Canonical or pre-materialized JSON-lines file (jsonl format).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, alias = "dev")]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validate the config and print the run header without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `<paths.out>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub subset: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "query")]
    pub query_id: String,
    #[arg(long = "doc")]
    pub doc_id: String,
    /// Output directory; defaults to `<paths.out>/attention/<query>__<doc>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training seed written into the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// squad, quasar-t, wikiqa or trecqa.
    #[arg(long)]
    pub benchmark: String,
    /// Embedding bundle directory referenced by the config.
    #[arg(long, default_value = "bundle")]
    pub bundle: PathBuf,
    /// Number of layers in the bundle (mixed with equal weights).
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Caps the global rayon pool when `MRNN_THREADS` is set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => bail!("{THREADS_ENV} must be a positive integer, got `{raw}`"),
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Rank(a) => commands::rank(&a),
        Command::ExportAttention(a) => commands::export_attention(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::InitConfig(a) => commands::init_config(&a),
    }
}
