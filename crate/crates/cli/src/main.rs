//! `protoselect` — reproducible prototype-database sparsification runs.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data/format error,
//! 4 internal invariant violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use protoselect::Error;

#[derive(Parser, Debug)]
#[command(
    name = "protoselect",
    version,
    about = "Shrink a K-nearest-neighbor prototype database by energy-minimization-driven selection"
)]
struct Cli {
    /// Run configuration (TOML). Required by every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured worker count (0 = default pool). Results
    /// never depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured synthetic dataset splits as CSV files.
    Gen,
    /// Parse a prototype CSV and store the binary database.
    Ingest {
        /// CSV to ingest; defaults to the configured input.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output database path; defaults to <out_dir>/db.pdb.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rank prototypes and write the rank export plus bin-edge table.
    Rank,
    /// Apply a retention plan and export the sparsified database.
    Sparsify {
        /// Plan file (a `fractions=` line, as written by optimize).
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Search retention fractions (and optionally the term weights).
    Optimize {
        /// Reuse evaluations recorded in an existing trace.log.
        #[arg(long)]
        resume: bool,
    },
    /// Score the full and sparsified databases on the test split.
    Evaluate {
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Summarize the artifacts of a completed run.
    Report,
}

fn load_config(cli: &Cli) -> protoselect::Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <file> is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out_dir) = &cli.out_dir {
        cfg.out_dir = out_dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> protoselect::Result<()> {
    let cfg = load_config(cli)?;
    let body = || match &cli.command {
        Command::Gen => commands::cmd_gen(&cfg),
        Command::Ingest { input, output } => {
            commands::cmd_ingest(&cfg, input.as_deref(), output.as_deref())
        }
        Command::Rank => commands::cmd_rank(&cfg),
        Command::Sparsify { plan } => commands::cmd_sparsify(&cfg, plan.as_deref()),
        Command::Optimize { resume } => commands::cmd_optimize(&cfg, *resume),
        Command::Evaluate { plan } => commands::cmd_evaluate(&cfg, plan.as_deref()),
        Command::Report => commands::cmd_report(&cfg),
    };
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(body)
    } else {
        body()
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::EmptySearchSet
        | Error::InsufficientData { .. }
        | Error::DimensionMismatch { .. } => 2,
        Error::Format { .. } | Error::Corrupt(_) | Error::EmptyInput | Error::Io(_) => 3,
        Error::Internal(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
