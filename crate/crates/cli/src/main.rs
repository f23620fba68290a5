//! `patchscore`: score patch-embedding banks, evaluate results, render heatmaps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

mod commands;
mod config;
mod error;
mod output;
mod score;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{EvalArgs, GenFixturesArgs, HeatmapArgs, InspectArgs};
use crate::config::ScoreArgs;

#[derive(Debug, Parser)]
#[command(name = "patchscore", version, about = "Training-free anomaly detection by patch matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score a bank and write results.json plus per-image patch maps.
    Score(ScoreArgs),
    /// Image- and pixel-level metrics of a results file.
    Eval(EvalArgs),
    /// Render one image's anomaly map as a grayscale PNG.
    Heatmap(HeatmapArgs),
    /// Write a synthetic test bank, a normal training bank and their labels.
    GenFixtures(GenFixturesArgs),
    /// Print the metadata of a bank.
    Inspect(InspectArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Score(a) => score::cmd_score(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Heatmap(a) => commands::cmd_heatmap(a),
        Command::GenFixtures(a) => commands::cmd_gen_fixtures(a),
        Command::Inspect(a) => commands::cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
