//! Command-line driver sequencing the pipeline stages over one config file.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error, 64 usage error.

mod config;
mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{apply_override, ExemplarOptions, PathsConfig, PipelineConfig, ReportOptions};
pub use stages::{OutputLock, Outputs, Provenance, Runner, Stage, CHECKPOINT_FILE, DIFF_TABLE_FILE, EXEMPLARS_FILE, OUTCOMES_FILE, PROVENANCE_FILE};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "crossdiff", version, about = "Crosscoder model diffing pipeline")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "crossdiff.toml")]
    pub config: PathBuf,
    /// Rerun the requested stage (every stage for `pipeline`) even if its outputs exist.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override a config value, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired corpus with planted latents.
    Synth,
    /// Train the crosscoder.
    Train,
    /// Decoder-norm differences per latent.
    Diff,
    /// Latent scaling and unique-latent selection.
    Scale,
    /// Top-activating documents of the unique latents.
    Exemplars,
    /// Interpret and categorize the unique latents.
    Annotate,
    /// Category frequency tables and plot data.
    Report,
    /// All stages in order.
    Pipeline,
}

impl Command {
    fn target(self) -> Stage {
        match self {
            Command::Synth => Stage::Synth,
            Command::Train => Stage::Train,
            Command::Diff => Stage::Diff,
            Command::Scale => Stage::Scale,
            Command::Exemplars => Stage::Exemplars,
            Command::Annotate => Stage::Annotate,
            Command::Report | Command::Pipeline => Stage::Report,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { log::LevelFilter::Debug } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
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
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> crate::Result<Outputs> {
    let cfg = PipelineConfig::load(&cli.config, &cli.overrides)?;
    let target = cli.command.target();
    let all = matches!(cli.command, Command::Pipeline);
    Runner::new(cfg, cli.force, target, all).run_until(target)
}
