//! Command-line front end: dispatch experiments in, CSV/JSON artifacts out.
//!
//! Exit codes: 0 success, 1 solver failure, 2 configuration or data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "vppmpc", about = "Stochastic VPP dispatch with certified bounds", version)]
struct Cli {
    /// TOML configuration file; omitted sections use built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// root random seed (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker thread cap, 0 = all cores (overrides VPPMPC_THREADS and config)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// artifact directory (overrides VPPMPC_OUTPUT_DIR and config)
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the certified refinement loop on one horizon window
    SolveOnce,
    /// Run the receding-horizon closed loop
    RunMpc {
        /// number of wall-clock steps (overrides the config)
        #[arg(long)]
        steps: Option<usize>,
        /// use one cluster per step (exact aggregation mode)
        #[arg(long)]
        force_singleton_clusters: bool,
    },
    /// Compare full-scale control against the aggregated controller over a size grid
    Bench,
    /// Sample a randomized portfolio and write it as JSON
    SamplePortfolio {
        #[arg(long)]
        n_storage: Option<usize>,
        #[arg(long)]
        n_thermal: Option<usize>,
    },
    /// Validate a base-series CSV file
    ValidateData {
        /// file to check (defaults to the configured data path)
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.run.threads = threads;
    }
    if let Some(dir) = cli.output_dir {
        cfg.run.output_dir = dir;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("config error: {e:#}");
        return ExitCode::from(2);
    }
    if cfg.run.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.threads)
            .build_global()
        {
            eprintln!("config error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let outcome = match cli.command {
        Command::SolveOnce => commands::solve_once(&cfg),
        Command::RunMpc { steps, force_singleton_clusters } => {
            if let Some(steps) = steps {
                cfg.mpc.steps = steps;
            }
            if force_singleton_clusters {
                cfg.mpc.force_singleton_clusters = true;
            }
            commands::run_mpc(&cfg)
        }
        Command::Bench => commands::bench(&cfg),
        Command::SamplePortfolio { n_storage, n_thermal } => {
            if let Some(n) = n_storage {
                cfg.portfolio.n_storage = n;
            }
            if let Some(n) = n_thermal {
                cfg.portfolio.n_thermal = n;
            }
            commands::sample_portfolio_cmd(&cfg)
        }
        Command::ValidateData { path } => commands::validate_data(&cfg, path.as_deref()),
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CmdError::Config(e)) => {
            eprintln!("config/data error: {e:#}");
            ExitCode::from(2)
        }
        Err(commands::CmdError::Solver(e)) => {
            eprintln!("solver error: {e:#}");
            ExitCode::from(1)
        }
    }
}
