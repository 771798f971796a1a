mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{CliError, CliResult, Output};
use config::RunConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable overriding the output directory of the config.
const OUT_ENV: &str = "ROBUST_DP_OUT";

#[derive(Parser)]
#[command(name = "robust-dp", version, about = "Robust stochastic control: exact and neural solvers, hedging and error bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides ROBUST_DP_OUT and `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Backward induction on the scenario tree; writes solve.json and value_table.txt.
    SolveExact,
    /// Neural training with solver.method; writes train.json, model.txt and train_log.csv.
    Train,
    /// Values of the exact or a trained policy over a sampled ambiguity family.
    Evaluate,
    /// Trains hedges on the training period and backtests them with the delta hedge.
    HedgeBacktest,
    /// Error bounds against measured value gaps on an audit instance.
    Bounds,
    /// Exact solver against exhaustive enumeration and the saddle-point chain.
    OracleCheck,
    /// Prints the parsed configuration with defaults filled in.
    ShowConfig,
}

fn load(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cfg = RunConfig::from_toml(&text, base)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml().map_err(CliError::Config)?);
        return Ok(());
    }
    let dir = commands::output_dir(cli.out.as_deref(), std::env::var(OUT_ENV).ok(), &cfg);
    let out = Output::new(dir)?;
    match cli.command {
        Command::SolveExact => commands::solve_exact(&cfg, &out),
        Command::Train => commands::train(&cfg, &out),
        Command::Evaluate => commands::evaluate(&cfg, &out),
        Command::HedgeBacktest => commands::hedge_backtest(&cfg, &out),
        Command::Bounds => commands::bounds(&cfg, &out),
        Command::OracleCheck => commands::oracle_check(&cfg, &out),
        Command::ShowConfig => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
