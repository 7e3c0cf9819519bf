//! `prunepart`: drives the split-inference pipeline over one run directory.
//!
//! Stages run in dependency order — train, prune1, prune2, profile, then
//! plan/sweep/simulate/report — each persisting its completion (with a
//! configuration digest) in `manifest.toml`. Re-running a completed stage is
//! a no-op; running a stage whose inputs changed or never ran is refused
//! with the stage to run first.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing or stale
//! prerequisite stage, 4 no feasible plan.

mod config;
mod manifest;
mod report;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Config;
use manifest::Stage;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable, unparsable, or semantically invalid configuration.
    Config(String),
    /// A required earlier stage is missing or stale.
    Prerequisite(String),
    /// No (model, partition) candidate satisfies the accuracy floor.
    Infeasible(String),
    /// Everything else (I/O, internal validation).
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Prerequisite(_) => 3,
            CliError::Infeasible(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Prerequisite(m)
            | CliError::Infeasible(m)
            | CliError::Runtime(m) => m,
        }
    }
}

impl From<prunepart::Error> for CliError {
    fn from(e: prunepart::Error) -> Self {
        match e {
            prunepart::Error::MissingPrerequisite(m) => CliError::Prerequisite(m),
            prunepart::Error::InvalidInput(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "prunepart",
    version,
    about = "Two-step filter pruning and partition planning for device/edge split inference"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "prunepart.toml")]
    config: PathBuf,
    /// Run directory (default: $PRUNEPART_OUT/<run.output_dir>, or
    /// <run.output_dir> alone).
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline model and start the model catalog.
    Train,
    /// Step-1 pruning: iterative global filter removal for device compute.
    Prune1,
    /// Step-2 pruning: per-boundary families that shrink transferred features.
    Prune2,
    /// Profile every catalog record (per-layer time, bytes, encoded bytes).
    Profile,
    /// Pick the latency-minimal (record, partition) pair.
    Plan {
        /// Override [system] gamma.
        #[arg(long)]
        gamma: Option<f64>,
        /// Override [system] rate, e.g. "5.85 Mbps".
        #[arg(long)]
        rate: Option<String>,
        /// Override [system] use_codec.
        #[arg(long)]
        use_codec: Option<bool>,
    },
    /// Plan across the [sweep] grid of link rates and device slowdowns.
    Sweep,
    /// Replay the selected plan on the simulator and cross-check it.
    Simulate,
    /// Render all result tables (CSV + markdown).
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(&cli.config)?;
    let stage = match &cli.command {
        Command::Train => Stage::Train,
        Command::Prune1 => Stage::Prune1,
        Command::Prune2 => Stage::Prune2,
        Command::Profile => Stage::Profile,
        Command::Plan { gamma, rate, use_codec } => {
            // Overrides become part of the effective config, so they digest
            // (and therefore re-plan) exactly like editing the file.
            if let Some(g) = gamma {
                cfg.system.gamma = *g;
            }
            if let Some(r) = rate {
                cfg.system.rate = r.parse().map_err(CliError::Config)?;
            }
            if let Some(u) = use_codec {
                cfg.system.use_codec = *u;
            }
            Stage::Plan
        }
        Command::Sweep => Stage::Sweep,
        Command::Simulate => Stage::Simulate,
        Command::Report => Stage::Report,
    };
    let dir = manifest::resolve_output(cli.output, &cfg);
    stages::run(stage, &cfg, &dir)?;
    Ok(())
}
