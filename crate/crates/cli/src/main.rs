//! `skt-spatial`: simulate, fit, compare and generate from the multi-resolution
//! skew-t spatial model.

mod commands;
mod config;
mod error;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::{ExperimentConfig, ModelKind, Overrides};
use error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "skt-spatial", version, about = "Multi-resolution skew-t spatial model", long_about = None)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment configuration; defaults to the built-in two-region design.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Model fitted by `fit`.
    #[arg(long, global = true, value_enum)]
    model: Option<ModelKind>,

    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Replicates for `compare`.
    #[arg(long, global = true)]
    replicates: Option<usize>,

    /// Time points to simulate or generate.
    #[arg(long = "T", global = true, value_name = "T")]
    n_times: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one dataset from the configured true parameters.
    Simulate,
    /// Fit one model to a data CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Layout JSON; defaults to the configured layout.
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Simulate replicates, fit both models to each and compare BIC/AIC.
    Compare,
    /// Emit synthetic fields from a fit report.
    Generate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        /// Layout JSON; defaults to the layout stored in the report.
        #[arg(long)]
        layout: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot start {n} worker threads: {e}")))?;
    }
    let runs = match &cli.command {
        Command::Generate { runs, .. } => *runs,
        _ => None,
    };
    let overrides = Overrides {
        seed: cli.seed,
        n_times: cli.n_times,
        replicates: cli.replicates,
        model: cli.model,
        out: cli.out.clone(),
        runs,
    };
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Simulate => commands::simulate::run(&cfg),
        Command::Fit { data, layout } => commands::fit::run(&cfg, data, layout.as_deref()),
        Command::Compare => commands::compare::run(&cfg),
        Command::Generate { report, layout, .. } => commands::generate::run(&cfg, report, layout.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
