mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

/// Exit status for malformed invocations, configs and inputs.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for failures while running a valid request.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

pub fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "dd-spectro",
    version,
    about = "Noise spectroscopy from dynamical-decoupling coherence curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Key-value settings file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a network for one pulse-count cap.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        nbar: Option<u32>,
    },
    /// Random hyperparameter search.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        nbar: Option<u32>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Predict NSD parameters from feature vectors, one comma-separated vector per line.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Harmonics-spectroscopy reconstruction of the test split.
    Hs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        nbar: Option<u32>,
    },
    /// Score one trained model, and the baseline at the same cap, on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare both methods across pulse-count caps.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory holding model_nbar{N}.txt files.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated caps.
        #[arg(long)]
        nbars: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, count } => commands::gen(&common, count),
        Command::Train {
            common,
            dataset,
            nbar,
        } => commands::train(&common, dataset, nbar),
        Command::Search {
            common,
            dataset,
            nbar,
            trials,
        } => commands::search(&common, dataset, nbar, trials),
        Command::Predict {
            common,
            model,
            input,
        } => commands::predict(&common, model, input),
        Command::Hs {
            common,
            dataset,
            nbar,
        } => commands::hs(&common, dataset, nbar),
        Command::Eval {
            common,
            dataset,
            model,
        } => commands::eval(&common, dataset, model),
        Command::Sweep {
            common,
            dataset,
            model,
            nbars,
        } => commands::sweep(&common, dataset, model, nbars),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message })
    );
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), EXIT_USAGE),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), e.code()),
    }
}
