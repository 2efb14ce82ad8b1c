use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use besskit::cli::{
    cmd_backtest, cmd_cluster, cmd_forecast, cmd_ingest, cmd_place, cmd_report, cmd_sweep,
    cmd_synth, write_resolved_config, RunConfig,
};
use besskit::Result;

#[derive(Parser)]
#[command(
    name = "besskit",
    version,
    about = "Battery storage market revenue analysis: dispatch, deployment planning, siting"
)]
struct Cli {
    /// Config file (TOML); flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Sweep worker threads (0 = logical CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Dataset directory (also via BESSKIT_DATA_ROOT).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
    },
    /// Validate raw market CSVs and write the canonical dataset directory.
    Ingest {
        /// Directory holding registry.csv, lmp.csv, reg_prices.csv and
        /// optionally reg_signal.csv.
        #[arg(long)]
        src: PathBuf,
    },
    /// Solve maximum-revenue dispatch for every node-day into the ledger.
    Sweep {
        /// "joint" or "energy_only".
        #[arg(long)]
        mode: Option<String>,
    },
    /// Emit the analysis bundle from the ledger.
    Report,
    /// Forecast next-month volatility per node.
    Forecast,
    /// Group nodes by volatility behaviour.
    Cluster {
        /// Cluster count; 0 picks one automatically.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Solve the siting problem for the next month.
    Place,
    /// Walk-forward comparison of the siting pipeline against the
    /// previous-month-top-nodes baseline.
    Backtest,
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(dir) = cli.data_dir {
        cfg.data_dir = dir;
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    match &cli.command {
        Command::Synth { nodes, days } => {
            if let Some(n) = nodes {
                cfg.synth.nodes = *n;
            }
            if let Some(d) = days {
                cfg.synth.days = *d;
            }
        }
        Command::Sweep { mode: Some(m) } => cfg.dispatch.mode = m.clone(),
        Command::Cluster { k: Some(k) } => cfg.cluster.k = *k,
        _ => {}
    }
    write_resolved_config(&cfg)?;

    match cli.command {
        Command::Synth { .. } => {
            let dir = cmd_synth(&cfg)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Ingest { src } => {
            let dir = cmd_ingest(&cfg, &src)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Sweep { .. } => {
            let outcome = cmd_sweep(&cfg)?;
            println!(
                "sweep: {} computed, {} skipped, {} failed",
                outcome.computed, outcome.skipped, outcome.failed
            );
            if outcome.failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report => {
            let dir = cmd_report(&cfg)?;
            println!("report written to {}", dir.display());
        }
        Command::Forecast => {
            let path = cmd_forecast(&cfg)?;
            println!("forecasts written to {}", path.display());
        }
        Command::Cluster { .. } => {
            let path = cmd_cluster(&cfg)?;
            println!("clusters written to {}", path.display());
        }
        Command::Place => {
            let path = cmd_place(&cfg)?;
            println!("placement written to {}", path.display());
        }
        Command::Backtest => {
            let path = cmd_backtest(&cfg)?;
            println!("backtest written to {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
