//! Command-line front end for WBR experiments: `run`, `grid`, `report`, `footprint`.

pub mod config;
pub mod grid;
pub mod report;
pub mod run;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use wbr::memory::{ImportanceMode, MemoryStore};

use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "wbr", version, about = "Weight Balancing Replay experiments")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every seed of one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set train.lr=0.1`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sweep the Cartesian product of one or more axes.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// `NAME=v1,v2,...`; NAME is lr, N, alpha, beta, momentum or a dotted key.
        #[arg(long = "axis", value_name = "NAME=VALUES", required = true)]
        axes: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Concurrent (cell, seed) runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Merge run directories into one table, with deltas against a baseline.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Where report.md, report.csv and curves.csv go.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Size of a memory store in equivalent raw samples.
    Footprint {
        #[arg(long)]
        store: PathBuf,
        /// Sample shape as HxWxC.
        #[arg(long, value_parser = parse_shape)]
        sample: (usize, usize, usize),
    },
}

pub fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected HxWxC, got {s:?}"))?;
    match dims[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        _ => Err(format!("expected HxWxC with positive sizes, got {s:?}")),
    }
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        2
    } else {
        1
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let data = run::load_datasets(&cfg.dataset_paths()?)?;
            let records = run::run_config(&cfg, &data, &cfg.output_dir)?;
            for (seed, r) in cfg.seeds.iter().zip(&records) {
                println!(
                    "seed {seed}: A_B {:.2}  A_bar {:.2}",
                    r.final_accuracy, r.average_accuracy
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Grid {
            config,
            axes,
            overrides,
            jobs,
        } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let axes = axes
                .iter()
                .map(|a| grid::Axis::parse(a))
                .collect::<Result<Vec<_>, _>>()?;
            let summaries = grid::run_grid(&cfg, &axes, jobs, &cfg.output_dir)?;
            print!("{}", grid::grid_markdown(&axes, &summaries));
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Report {
            dirs,
            baseline,
            out,
        } => {
            let report = report::build(&dirs, baseline.as_deref())?;
            report.write(&out)?;
            print!("{}", report.markdown());
        }
        Command::Footprint { store, sample } => {
            let s = MemoryStore::load(&store, ImportanceMode::Average)
                .with_context(|| format!("loading {}", store.display()))?;
            let fp = s.footprint_in_samples(sample);
            println!(
                "{} vectors x {} dims = {fp:.2} samples of {}x{}x{}",
                s.len(),
                s.dim(),
                sample.0,
                sample.1,
                sample.2
            );
        }
    }
    Ok(())
}
