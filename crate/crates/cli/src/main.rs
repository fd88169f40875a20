use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shufflefl_cli::config::{load_experiment, load_sweep};
use shufflefl_cli::experiment::{cmd_partition, cmd_quantify, cmd_run, PointsSpec};
use shufflefl_cli::sweep::cmd_sweep;
use shufflefl_cli::theory::{cmd_theory, load_theory};
use shufflefl_cli::{CliError, CliResult};

/// Federated learning simulator for data shuffling and synthetic augmentation.
#[derive(Parser)]
#[command(name = "shufflefl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the master seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, measure heterogeneity and write logs, reports and a summary.
    Run(Common),
    /// Estimate heterogeneity constants at a set of points.
    Quantify {
        #[command(flatten)]
        common: Common,
        /// `trajectory` (fresh unshuffled run), `gaussian`, or a trajectory JSON file.
        #[arg(long, default_value = "trajectory")]
        points: PointsSpec,
    },
    /// Tabulate predicted round counts.
    Theory(Common),
    /// Run every cell of a grid over a base configuration.
    Sweep(Common),
    /// Build the federation and write its manifest and histogram.
    Partition(Common),
}

fn execute(cmd: Command) -> CliResult<()> {
    let with_seed = |c: &Common| -> CliResult<_> {
        let mut cfg = load_experiment(&c.config)?;
        if let Some(seed) = c.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    };
    match cmd {
        Command::Run(c) => {
            let res = cmd_run(&with_seed(&c)?, &c.out)?;
            println!("{}", res.summary_path.display());
        }
        Command::Quantify { common, points } => {
            let res = cmd_quantify(&with_seed(&common)?, &points, &common.out)?;
            println!("{}", res.report_path.display());
        }
        Command::Theory(c) => {
            let (_, path) = cmd_theory(&load_theory(&c.config)?, c.seed.unwrap_or(0), &c.out)?;
            println!("{}", path.display());
        }
        Command::Sweep(c) => {
            let res = cmd_sweep(&load_sweep(&c.config)?, c.seed, &c.out)?;
            log::info!("{} of {} cells reused", res.reused, res.output.cells.len());
            println!("{}", res.table.display());
            let failed = res.output.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} cells did not complete")));
            }
        }
        Command::Partition(c) => {
            println!("{}", cmd_partition(&with_seed(&c)?, &c.out)?.display());
        }
    }
    Ok(())
}

fn jobs(cmd: &Command) -> Option<usize> {
    match cmd {
        Command::Run(c) | Command::Theory(c) | Command::Sweep(c) | Command::Partition(c) => c.jobs,
        Command::Quantify { common, .. } => common.jobs,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = jobs(&cli.command) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
