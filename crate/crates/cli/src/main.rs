use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Dynamic probabilistic reconciliation of hierarchical forecasts.
#[derive(Debug, Parser)]
#[command(name = "dynrecon", version)]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct Inputs {
    /// Wide panel CSV: a time column, then one column per series.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Hierarchy CSV with `parent,child` edges.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Exogenous forecasts CSV: `series_id,origin_time,horizon,mean,variance`.
    #[arg(long)]
    exo: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a dynamic method through the data and save a checkpoint.
    Fit {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// mrdlm, dhf, dhf-hier or dhf-2step; overrides the configuration.
        #[arg(long)]
        method: Option<String>,
    },
    /// Prior forecasts of every series from a checkpoint.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconcile exogenous forecasts at the checkpoint origin, optionally
    /// after absorbing further rows.
    Reconcile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        exo: Option<PathBuf>,
        /// Rows after the checkpoint, with the same columns as the fit data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Weight trajectory CSV; next to `--out` when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Write the updated state to this checkpoint.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Rolling-origin comparison of methods.
    Backtest {
        #[command(flatten)]
        inputs: Inputs,
        /// Score table CSV; the text rendering goes to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Comma-separated method names; overrides the configuration.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Also write every scored forecast in the `score` input format.
        #[arg(long)]
        forecasts_out: Option<PathBuf>,
    },
    /// Score stored forecasts against a panel.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        /// CSV of `method,origin_time,series_id,horizon,mean,variance`.
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic hierarchy, panel, exogenous forecasts and config.
    Simulate {
        /// Directory for the generated files.
        #[arg(long)]
        out: PathBuf,
        /// Children per node at each depth, e.g. `3,4`.
        #[arg(long, value_delimiter = ',', default_value = "3,4")]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 150)]
        periods: usize,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
