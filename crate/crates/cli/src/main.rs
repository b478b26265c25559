//! `latefuse` command-line driver: data generation, training, evaluation,
//! library ablation and residual inspection.

mod ablate;
mod config;
mod error;
mod eval;
mod gen;
mod inspect;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{AblateSettings, Common, EvalSettings, GenSettings, InspectSettings, TrainSettings};
use error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "latefuse", version, about = "Late-fusion neural operator experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train, in-domain and out-domain datasets.
    Gen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        settings: GenSettings,
    },
    /// Train a late-fusion or baseline model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        settings: TrainSettings,
    },
    /// Roll out checkpoints (or compare two datasets) and write metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        settings: EvalSettings,
    },
    /// Sweep libraries, sparsity weights and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        settings: AblateSettings,
    },
    /// Split learned residuals into parameter-dependent and independent parts.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        settings: InspectSettings,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("LATEFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("LATEFUSE_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::runtime(format!("thread pool: {e}")))
}

fn dispatch(cmd: Command) -> Result<()> {
    configure_threads()?;
    match cmd {
        Command::Gen { common, settings } => {
            let (run, out) = settings.resolve(&common)?;
            gen::run(&run, &out)
        }
        Command::Train { common, settings } => {
            let (settings, out) = settings.merged(&common)?;
            train::run(settings, &out)
        }
        Command::Eval { common, settings } => {
            let (run, out) = settings.resolve(&common)?;
            eval::run(&run, &out)
        }
        Command::Ablate { common, settings } => {
            let (settings, out) = settings.merged(&common)?;
            ablate::run(settings, &out)
        }
        Command::Inspect { common, settings } => {
            let (run, out) = settings.resolve(&common)?;
            inspect::run(&run, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(e.exit_code())
        }
    }
}
