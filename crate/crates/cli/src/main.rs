use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

#[derive(Parser, Debug)]
#[command(name = "befa", version, about = "Bayesian exploratory factor analysis for crossed ordinal ratings")]
struct Cli {
    /// Worker threads for chains and draw-parallel stages.
    #[arg(long, global = true, env = "BEFA_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutArg {
    /// Output directory; defaults to a fresh timestamped directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset with known ground truth.
    Simulate(commands::SimulateArgs),
    /// Run the sampler and write a draw archive.
    Fit(commands::FitArgs),
    /// Varimax-rotate and align the draws of an archive.
    Identify(commands::IdentifyArgs),
    /// LPML for one or more archives.
    Lpml(commands::LpmlArgs),
    /// Parallel analysis on the posterior correlation eigenvalues.
    Parallel(commands::ParallelArgs),
    /// Disattenuated correlations between factor scores and an external measure.
    Stage2(commands::Stage2Args),
    /// Figures and tables from one or more archives.
    Report(commands::ReportArgs),
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Identify(a) => commands::identify(a),
        Command::Lpml(a) => commands::lpml(a),
        Command::Parallel(a) => commands::parallel(a),
        Command::Stage2(a) => commands::stage2(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
