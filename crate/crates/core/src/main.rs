use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use isql::cli::serve::{serve, Service, PROTOCOL};
use isql::cli::{eval_dir, inspect, run_experiment, ExperimentConfig, ExperimentKind};
use isql::error::Result;
use isql::isql::TrainArtifact;

/// Inverse soft Q-learning experiments and assist sessions.
///
/// ISQL_OUTPUT_DIR overrides a config's output directory and ISQL_WORKERS
/// caps the worker pool.
#[derive(Parser)]
#[command(name = "isql", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Serve assist sessions for a `serve` config.
    Serve { config: PathBuf },
    /// Reload and summarise the artifacts of a run directory.
    Eval { dir: PathBuf },
    /// Print a checkpoint summary as JSON.
    Inspect {
        checkpoint: PathBuf,
        /// Refuse the checkpoint unless it carries this config hash.
        #[arg(long)]
        expect_hash: Option<String>,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config } => {
            let config = ExperimentConfig::load(&config)?.with_env_overrides();
            let report = run_experiment(&config)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for f in &report.files {
                println!("{}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { config } => {
            let config = ExperimentConfig::load(&config)?;
            if config.kind != ExperimentKind::Serve {
                return Err(isql::error::Error::Config(format!(
                    "serve needs kind = \"serve\", got \"{}\"",
                    config.kind.as_str()
                )));
            }
            let service = Service::from_settings(&config.serve, config.grid, config.pointmass)?;
            let listener = TcpListener::bind(&config.serve.address)?;
            eprintln!(
                "{PROTOCOL} on {} ({}, task {}, phi {})",
                listener.local_addr()?,
                config.serve.env.as_str(),
                service.task,
                service.phi_ref
            );
            serve(Arc::new(service), listener)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { dir } => {
            let report = eval_dir(&dir)?;
            print!("{}", report.artifacts.to_csv()?);
            match report.failed {
                Some(msg) => {
                    eprintln!("run failed: {}", msg.trim());
                    Ok(ExitCode::FAILURE)
                }
                None => Ok(ExitCode::SUCCESS),
            }
        }
        Command::Inspect {
            checkpoint,
            expect_hash,
            force,
        } => {
            if let Some(h) = expect_hash {
                TrainArtifact::load_checked(&checkpoint, &h, force)?;
            }
            println!("{}", serde_json::to_string_pretty(&inspect(&checkpoint)?)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
