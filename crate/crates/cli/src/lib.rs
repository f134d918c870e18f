//! Command-line driver: dataset generation, training, analysis, sweeps and
//! the dense demo, all configured from a key-value file.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Overrides, SweepParam, SweepSpec};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gradtail", version, about = "Per-example loss weighting experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment configuration file; a run manifest also works.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `experiment.out`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Use seeds 0..N for both data and model.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: Option<u64>,
    /// Fully serial execution, for bitwise reproducibility checks.
    #[arg(long, global = true)]
    pub reference_mode: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write dataset files and their manifests.
    GenData,
    /// Train one run per (seed, strategy).
    Train,
    /// Report on run directories and summarize across seeds.
    Analyze {
        /// Run directories; defaults to every run under `<out>/runs`.
        runs: Vec<PathBuf>,
    },
    /// Train and compare across values of one strategy parameter.
    Sweep {
        /// pivot, max_weight or inverse_frequency_w; overrides `sweep.param`.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values; overrides `sweep.values`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Option<Vec<f64>>,
    },
    /// Uniform against GradTail on the synthetic dense task.
    DenseDemo,
}

fn load_config(args: &CommonArgs, dense_default: bool) -> CliResult<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if dense_default => ExperimentConfig {
            kind: config::Kind::Dense,
            ..ExperimentConfig::default()
        },
        None => ExperimentConfig::default(),
    };
    config.apply(&Overrides {
        out: args.out.clone(),
        seeds: args.seeds,
        reference_mode: args.reference_mode,
    })?;
    Ok(config)
}

fn execute(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli.common, matches!(cli.command, Command::DenseDemo))?;
    match cli.command {
        Command::GenData => {
            for dir in commands::gen_data(&config)? {
                println!("{}", dir.display());
            }
        }
        Command::Train => {
            for job in commands::train(&config)? {
                println!("{}", job.dir.display());
            }
        }
        Command::Analyze { runs } => {
            let runs = if runs.is_empty() {
                commands::list_runs(&config.out.join("runs"))?
            } else {
                runs
            };
            print!("{}", commands::analyze(&runs, &config.out, true)?);
        }
        Command::Sweep { param, values } => {
            let from_file = config.sweep.clone();
            let param = match (param, &from_file) {
                (Some(p), _) => SweepParam::from_name(&p)?,
                (None, Some(s)) => s.param,
                (None, None) => return Err(CliError::Config("sweep needs --param or sweep.param".into())),
            };
            let values = match (values, &from_file) {
                (Some(v), _) => v,
                (None, Some(s)) => s.values.clone(),
                (None, None) => return Err(CliError::Config("sweep needs --values or sweep.values".into())),
            };
            if values.is_empty() {
                return Err(CliError::Config("sweep needs at least one value".into()));
            }
            print!("{}", commands::sweep(&config, &SweepSpec { param, values })?);
        }
        Command::DenseDemo => print!("{}", commands::dense_demo(&config)?),
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
