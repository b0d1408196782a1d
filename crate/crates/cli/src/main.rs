//! `magskin`: simulate a magnetic tactile skin, train the contact regressor,
//! evaluate it and stream live estimates.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "magskin", version, about = "Magnetic tactile skin workbench")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate the indentation trajectory and write the dataset CSV.
    GenData,
    /// Split, normalize and train; writes the checkpoint, history and test split.
    Train,
    /// Score the checkpoint on the test split and write the error map.
    Eval,
    /// Stream estimates from a replayed or simulated source.
    Infer,
    /// Finite-difference check of every gradient on a small network.
    Gradcheck,
    /// Score the nearest-sensor comparator on the test split.
    Baseline,
    /// Print the effective configuration.
    ShowConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match RunConfig::load(
        cli.config.as_deref(),
        &cli.overrides,
        cli.seed,
        cli.out.as_deref(),
    ) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("magskin: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Infer => commands::infer(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Baseline => commands::baseline(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_kv().render());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("magskin: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
