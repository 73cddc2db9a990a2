use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod manifest;

use config::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "sparse-unfold", version, about = "Sparse recovery solvers and unfolded networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    realizations: Option<usize>,
    /// Worker threads for `solve`.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw A and the test realizations; write them with a manifest.
    Generate(Common),
    /// Run the configured solvers and write averaged NMSE trajectories.
    Solve(Common),
    /// Train a network layer by layer and write a checkpoint.
    Train(Common),
    /// Per-layer test NMSE of a checkpoint next to AMP.
    Eval(Common),
    /// QQ data of the denoiser-input error for AMP, ISTA and LAMP.
    Qq {
        #[command(flatten)]
        common: Common,
        /// Replace the errors by standard-normal draws.
        #[arg(long)]
        inject_gaussian: bool,
    },
}

fn load(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let o = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        realizations: c.realizations,
        threads: c.threads,
    };
    ExperimentConfig::load(c.config.as_deref(), &o)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Generate(c) => commands::generate(&load(&c)?),
        Command::Solve(c) => commands::solve(&load(&c)?),
        Command::Train(c) => commands::train(&load(&c)?),
        Command::Eval(c) => commands::eval(&load(&c)?),
        Command::Qq { common, inject_gaussian } => commands::qq(&load(&common)?, inject_gaussian),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
