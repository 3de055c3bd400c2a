//! The `codebias` command-line pipeline.

pub mod adapter;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use codebias_core::corpus::{Split, SplitPlan};
use codebias_core::locator::Granularity;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "codebias", version, about = "Probe, locate and edit gender bias in a code language model")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set edit.max_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Directory that holds run directories.
    #[arg(long, global = true, env = run::RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
    /// Exact run directory to create instead of a timestamped one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct AdapterArgs {
    /// Launch an adapter and talk to it over stdio (split on whitespace).
    #[arg(long, conflicts_with = "adapter_url")]
    pub adapter_cmd: Option<String>,
    /// Base URL of an HTTP adapter.
    #[arg(long)]
    pub adapter_url: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the prompt dataset and the biased training corpus.
    Generate {
        #[arg(long)]
        professions: Option<PathBuf>,
        #[arg(long)]
        modifiers: Option<PathBuf>,
        #[arg(long)]
        split_plan: Option<SplitPlan>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the toy model on a generated corpus.
    Train {
        /// Output directory of `generate`.
        #[arg(long)]
        data: PathBuf,
    },
    /// FB-Score per split, from a checkpoint or an adapter.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        adapter: AdapterArgs,
        #[arg(long, value_delimiter = ',', default_value = "train,dev,test")]
        splits: Vec<Split>,
        /// Only the first N cases (by id) of each split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Locate bias-relevant parameters down to `level`.
    Locate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "row")]
        level: Granularity,
        #[arg(long, default_value = "train")]
        probe_split: Split,
        /// Reuse the stage reports of an earlier locate run.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Edit the parameters a mask selects.
    Edit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// `mask.json` from a locate run; omit to edit every parameter.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Verify run directories and tabulate their edit results.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Probe one prompt.
    Probe {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        adapter: AdapterArgs,
    },
}

/// Parses `argv` (program name first) and runs the command. Returns the run
/// directory.
pub fn run_cli<I, T>(argv: I) -> Result<PathBuf, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Config(e.render().to_string()),
    })?;
    let args = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    commands::execute(cli, args)
}
