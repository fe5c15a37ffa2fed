use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use vca_core::harness::{self, BackendChoice, HarnessConfig, RunOptions, SimulationPlan};
use vca_core::Mode;

/// Answer questions about long videos by reward-guided segment-tree exploration.
#[derive(Debug, Parser)]
#[command(name = "vca", version)]
struct Cli {
    /// Harness configuration (TOML with [backend], [episode], [paths]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// remote, sim, or scripted:<script path>.
    #[arg(long, global = true, default_value = "remote")]
    backend: BackendChoice,
    /// full, no_reward, no_tree or gt_reward; overrides the config.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Base seed for simulation sweeps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "vca-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every record of a JSONL dataset as an episode.
    Run { dataset: PathBuf },
    /// Sweep synthetic environments over modes and buffer sizes.
    Simulate { plan: PathBuf },
    /// Segment-distance report for a directory of traces.
    AnalyzeDistance { traces: PathBuf, dataset: PathBuf },
    /// Summarize a trace; with --verify, re-run it and compare byte for byte.
    Replay {
        trace: PathBuf,
        #[arg(long)]
        verify: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<HarnessConfig> {
    match path {
        Some(p) => HarnessConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(HarnessConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { dataset } => {
            let config = load_config(cli.config.as_deref())?;
            let opts = RunOptions {
                backend: cli.backend.clone(),
                mode: cli.mode,
            };
            let summary = harness::cmd_run(dataset, &config, &opts, &cli.out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::Simulate { plan } => {
            let mut plan = SimulationPlan::load(plan)?;
            if let Some(seed) = cli.seed {
                plan.sweep.base_seed = seed;
            }
            if let Some(mode) = cli.mode {
                plan.grid.modes = vec![mode];
            }
            let rows = harness::cmd_simulate(&plan, &cli.out)?;
            print!("{}", harness::sweep_table(&rows));
            Ok(true)
        }
        Command::AnalyzeDistance { traces, dataset } => {
            let report = harness::cmd_analyze_distance(traces, dataset)?;
            let json = serde_json::to_string_pretty(&report)?;
            std::fs::create_dir_all(&cli.out)?;
            std::fs::write(cli.out.join("distance.json"), &json)?;
            println!("{json}");
            Ok(true)
        }
        Command::Replay { trace, verify } => {
            let config = load_config(cli.config.as_deref())?;
            let report = harness::cmd_replay(trace, verify.then_some((&config, &cli.backend)))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.reproduced != Some(false))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("replayed trace differs from the original");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
