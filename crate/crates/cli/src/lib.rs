//! The `rlqg` command line: one subcommand per pipeline stage, all sharing a
//! JSON run config and an output directory of sealed artifacts.

pub mod artifacts;
pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{Overrides, RunConfig};
pub use stages::{Context, Stage};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing prerequisite artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("artifact {} {reason} (rerun the stage or pass --force)", path.display())]
    Mismatch { path: PathBuf, reason: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing(_) | CliError::Mismatch { .. } => 2,
            CliError::Config(_) | CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rlqg",
    version,
    about = "Question generation for event extraction, refined with RL"
)]
pub struct Cli {
    /// JSON run config; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, copied into every stage
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Never touch the network; remote backends replay their cassettes.
    #[arg(long, global = true)]
    pub offline: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Accept artifacts produced under a different config.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads; results do not depend on it
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Import a JSON-lines corpus.
    Ingest,
    /// Supervised fine-tuning of the toy question generator.
    Sft,
    /// Generate candidate questions for the training split.
    Augment,
    /// Score candidates and build the preference dataset.
    Pairs,
    /// Train the reward model on the preference pairs.
    TrainRm,
    /// Refine the fine-tuned policy with PPO.
    Ppo,
    /// Ask one question about an ad hoc event.
    Ask(AskArgs),
    /// Compare template, SFT and RL questions.
    Eval,
    /// Run every stage in order, resuming finished ones.
    E2e,
    /// Print the effective config.
    Config,
}

#[derive(Debug, Clone, clap::Args)]
pub struct AskArgs {
    #[arg(long)]
    pub role: String,
    #[arg(long)]
    pub trigger: String,
    #[arg(long)]
    pub context: String,
    #[arg(long, value_enum, default_value_t = PolicyChoice::Rl)]
    pub policy: PolicyChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyChoice {
    Sft,
    Rl,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        offline: cli.offline,
        jobs: cli.jobs,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_pretty_json());
        return Ok(());
    }
    let ctx = Context::new(cfg, cli.force)?;
    match &cli.command {
        Command::Synth => stages::run_stage(&ctx, Stage::Synth),
        Command::Ingest => stages::run_stage(&ctx, Stage::Ingest),
        Command::Sft => stages::run_stage(&ctx, Stage::Sft),
        Command::Augment => stages::run_stage(&ctx, Stage::Augment),
        Command::Pairs => stages::run_stage(&ctx, Stage::Pairs),
        Command::TrainRm => stages::run_stage(&ctx, Stage::TrainRm),
        Command::Ppo => stages::run_stage(&ctx, Stage::Ppo),
        Command::Eval => stages::run_stage(&ctx, Stage::Eval),
        Command::Ask(a) => {
            let r = stages::ask(&ctx, &a.role, &a.trigger, &a.context, a.policy)?;
            println!("question: {}", r.question);
            println!("recovered: {}", r.recovered);
            println!("answer: {}", r.answer);
            Ok(())
        }
        Command::E2e => {
            stages::e2e(&ctx)?;
            let table = ctx
                .store
                .path(&format!("{}/report.md", artifacts::EVAL_DIR));
            if let Ok(text) = std::fs::read_to_string(&table) {
                print!("{text}");
            }
            Ok(())
        }
        Command::Config => unreachable!("handled above"),
    }
}
