//! `dogma`: file-based pipeline from simulated scans to evaluated labels.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};

use config::PipelineConfig;
use stages::Env;

#[derive(Parser)]
#[command(name = "dogma", version, about = "Dynamic occupancy grid labeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for the simulator, the filter and the loss check.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Directory holding all artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Replace the scenario grid by an N×N grid centered on the ego.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    grid_size: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate lidar scans into measurement grids and ground truth.
    Simulate,
    /// Fuse measurement grids into DOGMa frames.
    Fuse,
    /// Label cells and boxes from the DOGMa sequence.
    Autolabel,
    /// Encode labels into detection tensors.
    Encode,
    /// Evaluate the loss on noisy predictions and check its gradient.
    LossCheck,
    /// Decode tensors and score detections and cell scores.
    DecodeEval,
    /// Combine metrics into one summary.
    Report,
    /// Run every stage in order.
    Run,
}

type Stage = fn(&Env) -> Result<()>;

const STAGES: [(&str, Stage); 7] = [
    ("simulate", stages::simulate),
    ("fuse", stages::fuse),
    ("autolabel", stages::autolabel_stage),
    ("encode", stages::encode_stage),
    ("loss-check", stages::loss_check),
    ("decode-eval", stages::decode_eval),
    ("report", stages::report),
];

fn selected(cmd: Command) -> &'static [(&'static str, Stage)] {
    match cmd {
        Command::Simulate => &STAGES[0..1],
        Command::Fuse => &STAGES[1..2],
        Command::Autolabel => &STAGES[2..3],
        Command::Encode => &STAGES[3..4],
        Command::LossCheck => &STAGES[4..5],
        Command::DecodeEval => &STAGES[5..6],
        Command::Report => &STAGES[6..7],
        Command::Run => &STAGES,
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path).context("config")?,
        None => PipelineConfig::default(),
    };
    let config = config.with_overrides(cli.seed, cli.grid_size.map(|n| n as usize));
    std::fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    let ctx = Env { config: &config, out: &cli.out, quiet: cli.quiet };
    for (name, stage) in selected(cli.command) {
        stage(&ctx).with_context(|| format!("stage {name}"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
