//! Command-line front end: dataset generation, experiment runs and metric
//! export. The binary is a thin wrapper around [`run`].

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use dataset::Dataset;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "ssunmix", version, about = "State-space hyperspectral unmixing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment config; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reduced band count and epoch budget where the config leaves them unset.
    #[arg(long)]
    pub desk_scale: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Assimilate the oscillating endmember of a scenario A dataset.
    Assimilate {
        /// Dataset directory written by `simulate`.
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and test the learned dynamics on a scenario B dataset.
    Learn {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Merge the metric tables of result directories.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Config for a command reading `dataset`: the `--config` file if given,
/// otherwise the config the dataset was generated with.
fn dataset_config(common: &Common, ds: &Dataset) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(Some(p), common.desk_scale, common.seed),
        None => ExperimentConfig::parse(&ds.manifest.config.to_json(), common.desk_scale, common.seed),
    }
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !Dataset::manifest_path(dir).is_file() {
        return Err(CliError::Missing(vec![Dataset::manifest_path(dir)]));
    }
    Dataset::read(dir)
}

/// Executes a parsed command line and returns the report for stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Simulate { common } => {
            let cfg = ExperimentConfig::load(common.config.as_deref(), common.desk_scale, common.seed)?;
            commands::simulate::run(&cfg, &common.out)
        }
        Command::Assimilate { dataset, common } => {
            let ds = read_dataset(&dataset)?;
            let cfg = dataset_config(&common, &ds)?;
            Ok(commands::assimilate::run(&ds, &cfg, &common.out)?.1)
        }
        Command::Learn { dataset, common } => {
            let ds = read_dataset(&dataset)?;
            let cfg = dataset_config(&common, &ds)?;
            Ok(commands::learn::run(&ds, &cfg, &common.out)?.1)
        }
        Command::Evaluate { out, inputs } => Ok(commands::evaluate::run(&inputs, &out)?.1),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, S>(args: I) -> Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(cli)
}
