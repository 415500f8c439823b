use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skt_core::config::RunConfig;
use skt_core::runner::{exit_code, run, Command, RunOptions, EXIT_CONFIG};

/// Stochastic SKT cross-diffusion simulator.
#[derive(Parser)]
#[command(name = "skt-spde", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate one path and write its diagnostics stream.
    Simulate(Common),
    /// Monte Carlo estimates of the configured functionals.
    Ensemble(Common),
    /// Strong-error and grid-refinement tables.
    Convergence(Common),
    /// Check the config against the model assumptions.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `ensemble.base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (speed only, results do not depend on it).
    #[arg(long, env = "SKT_SPDE_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Ensemble(a) => (Command::Ensemble, a),
        Sub::Convergence(a) => (Command::Convergence, a),
        Sub::Validate(a) => (Command::Validate, a),
    };
    let cfg = match RunConfig::from_path(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let opts = RunOptions { out: args.out, seed: args.seed, threads: args.threads };
    match run(&cfg, command, &opts) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for a in &outcome.artifacts {
                log::info!("wrote {}", a.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
