use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use volfit::market_data::DEFAULT_DELTA_MINUTES;
use volfit_cli::commands::{cmd_backtest, cmd_mcs, cmd_rv, cmd_simulate, cmd_sweep, cmd_tune};
use volfit_cli::config::DataSource;
use volfit_cli::{resolve_threads, with_workers, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "volfit", version, about = "Realized-volatility forecasting and backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to VOLFIT_THREADS or all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Pin the reference settings (5-minute bars, 630/1 rolling HAR,
    /// full grids, SR 0.40, gamma 2, 95% confidence sets).
    #[arg(long, global = true)]
    paper_defaults: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Compute daily log-RV from intraday bar files.
    Rv {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Simulate the configured synthetic panel.
    Simulate,
    /// Forecast, score and compare the configured models.
    Backtest,
    /// Sweep train windows and strides for one HAR specification.
    Sweep,
    /// Run the hyperparameter search only.
    Tune,
    /// Model confidence sets for an existing forecasts file.
    Mcs {
        #[arg(long)]
        forecasts: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.paper_defaults {
        config.apply_reference_defaults();
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let threads = resolve_threads(cli.threads)?;
    let config = load_config(cli)?;
    let out = cli.out.as_deref();
    with_workers(threads, || {
        match &cli.command {
            Command::Rv { inputs } => {
                let delta = match &config.data {
                    DataSource::Files(f) => f.delta_minutes,
                    _ => DEFAULT_DELTA_MINUTES,
                };
                let dir = out
                    .map(PathBuf::from)
                    .or_else(|| config.output_dir.clone())
                    .unwrap_or_else(|| PathBuf::from("volfit-out"));
                cmd_rv(inputs, delta, &dir)?;
            }
            Command::Simulate => {
                cmd_simulate(&config, out)?;
            }
            Command::Backtest => {
                cmd_backtest(&config, out)?;
            }
            Command::Sweep => {
                cmd_sweep(&config, out)?;
            }
            Command::Tune => {
                cmd_tune(&config, out)?;
            }
            Command::Mcs { forecasts } => {
                cmd_mcs(&config, forecasts, out)?;
            }
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
