//! `drax` command-line entry point.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "drax", version, about = "Distraction-removal video QA: train, evaluate, inspect, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its metrics log and checkpoint.
    Train(Common),
    /// Score a dataset with a checkpoint.
    Eval(Common),
    /// Write a synthetic planted-rule dataset.
    GenData(Common),
    /// Dump per-head attention weights, thresholds and masks for one sample.
    InspectAttention {
        #[command(flatten)]
        common: Common,
        /// Index of the sample to trace.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Train the masking/fusion ablations and the anchor-direction variants.
    Ablate(Common),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model seed (data seed for gen-data).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest or directory holding `manifest.json`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out dataset for `ablate`.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::GenData(c) => commands::gen_data(&c),
        Command::InspectAttention { common, sample } => commands::inspect(&common, sample),
        Command::Ablate(c) => commands::ablate(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drax: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
