use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use controlrec::data::PromptSplit;

mod commands;
mod config;

use commands::PromptMode;
use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or input files; exit code 2.
    Input(String),
    /// Non-finite values during training or evaluation; exit code 3.
    Numerical(String),
    /// A self-check failed; exit code 1.
    Verify(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Verify(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "controlrec",
    version,
    about = "Train and evaluate the ControlRec recommender on a synthetic corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Create the output directory if it is missing.
    #[arg(long)]
    create: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic catalog.
    GenData(Common),
    /// Build the prompt registry from the trigger templates.
    GenPrompts {
        #[command(flatten)]
        common: Common,
        /// Rule-based paraphrasing (the default).
        #[arg(long, conflicts_with = "live")]
        offline: bool,
        /// Paraphrase through the configured chat endpoint.
        #[arg(long)]
        live: bool,
    },
    /// Train and write checkpoints and the loss history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one prompt split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: PromptSplit,
        /// Defaults to the run's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the gradient, masking, loss, schedule and metric self-checks.
    Verify {
        /// Accepted for symmetry with the other commands; only its seed is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(c: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(&c.config, c.seed)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&load(&c)?, c.create),
        Command::GenPrompts { common, live, .. } => {
            let mode = if live { PromptMode::Live } else { PromptMode::Offline };
            commands::gen_prompts(&load(&common)?, mode, common.create)
        }
        Command::Train { common, resume } => {
            let cfg = load(&common)?;
            commands::ensure_dir(&cfg.out_dir, common.create)?;
            commands::train(&cfg, resume.as_deref())
        }
        Command::Eval {
            common,
            split,
            checkpoint,
        } => commands::eval(&load(&common)?, split, checkpoint.as_deref()),
        Command::Verify { config, seed } => {
            let seed = match (seed, config) {
                (Some(s), _) => s,
                (None, Some(p)) => RunConfig::load(&p, None)?.seed,
                (None, None) => 0,
            };
            if let Some(p) = controlrec::autodiff::fault::install_from_env() {
                eprintln!("fault injected into the backward rule of {p:?}");
            }
            commands::verify(seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
