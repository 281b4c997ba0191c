use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use teleport_core::config::ExperimentConfig;
use teleport_core::experiments::{self, RunSummary};

#[derive(Parser)]
#[command(name = "teleport-lab", version, about = "Neural teleportation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a key=value config file.
    Run {
        config: PathBuf,
        /// Directory for the CSV outputs.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads (defaults to the number of cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Check that teleporting a saved network leaves its loss unchanged.
    Verify {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Also write level_curve.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn data_root() -> PathBuf {
    std::env::var_os("TELEPORT_LAB_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn report(summary: &RunSummary) {
    for note in &summary.notes {
        println!("{note}");
    }
    for file in &summary.files {
        println!("wrote {}", file.display());
    }
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn main_inner(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, out, workers } => {
            if let Some(n) = workers {
                anyhow::ensure!(n > 0, "--workers must be at least 1");
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .context("cannot start worker pool")?;
            }
            let cfg = load_config(&config)?;
            let summary = experiments::run(&cfg, &out, &data_root())
                .with_context(|| format!("experiment {} failed", cfg.experiment))?;
            report(&summary);
        }
        Command::Verify { checkpoint, config, out } => {
            let cfg = load_config(&config)?;
            let summary = experiments::verify_checkpoint(&checkpoint, &cfg, &data_root(), out.as_deref())
                .with_context(|| format!("verification of {} failed", checkpoint.display()))?;
            report(&summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
