//! `vdpg`: dataset generation and import, pretraining, training, adaptation,
//! inference, evaluation, ablations and gradient checks.
//!
//! Log verbosity comes from `VDPG_LOG` (`error`..`trace`, default `info`).

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Parser)]
#[command(name = "vdpg", version, about = "Few-shot test-time domain adaptation with generated domain prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML run config, or `toy` for the built-in toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory to create. Must not exist.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Protocol {
    /// One generated prompt per target domain from its first k records.
    AdaptPerDomain,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum Replacement {
    Generated,
    Zeros,
    Random,
    Bank,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Suite {
    /// task only, +corr, +corr+dac, +unlabeled pretraining
    Losses,
    /// episodic vs ERM
    Scheme,
    /// generated prompt vs zeros, random and bank
    Replacement,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark and its oracle report.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Convert an embedding manifest into the dataset format.
    Import {
        #[command(flatten)]
        common: Common,
        /// Manifest file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train bank and generator on unlabeled domains.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory from gen-data, or a single dataset file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Episodic (or ERM) training on the source domains.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint instead of a fresh init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate one prompt per domain of a dataset.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Predict every record, adapting per domain or with a given prompt.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prompt file from `adapt`; applied to every record.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Per-domain and worst-case metrics on target domains.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "adapt-per-domain")]
        protocol: Protocol,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "generated")]
        replacement: Replacement,
    },
    /// Train and compare variants on one benchmark.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        /// Comma-separated seeds; defaults to the config's train seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of the full objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Import { common, data } => commands::import(&common, &data),
        Command::Pretrain { common, data } => commands::pretrain(&common, &data),
        Command::Train { common, data, checkpoint } => commands::train(&common, &data, checkpoint.as_deref()),
        Command::Adapt { common, checkpoint, data, k } => commands::adapt(&common, &checkpoint, &data, k),
        Command::Infer { common, checkpoint, data, prompt, k } => {
            commands::infer(&common, &checkpoint, &data, prompt.as_deref(), k)
        }
        Command::Eval { common, checkpoint, data, protocol, k, replacement } => {
            commands::eval(&common, &checkpoint, &data, protocol, k, replacement)
        }
        Command::Ablate { common, data, suite, seeds } => commands::ablate(&common, &data, suite, &seeds),
        Command::Gradcheck { common } => commands::gradcheck(&common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VDPG_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.record()).expect("error record serializes"));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
