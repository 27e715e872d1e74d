//! Cartesian sweeps over configuration keys.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use wbr::metrics::mean_std;
use wbr::optim::ClipPolicy;
use wbr::trainer::RunRecord;

use crate::config::{
    parse_scalar, set_clip, set_dotted, ConfigError, DatasetPaths, ExperimentConfig,
};
use crate::run::{self, Datasets};

pub const GRID_CSV: &str = "grid.csv";
pub const GRID_MD: &str = "grid.md";

/// One `--axis NAME=v1,v2,...` argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    /// Name as given on the command line, used for column headers.
    pub name: String,
    /// Dotted config key the values are written to.
    pub key: String,
    pub values: Vec<String>,
}

impl Axis {
    pub fn parse(arg: &str) -> Result<Self, ConfigError> {
        let (name, values) = arg
            .split_once('=')
            .ok_or_else(|| ConfigError::new(arg, "axis must look like NAME=v1,v2,..."))?;
        let name = name.trim();
        let values: Vec<String> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect();
        if values.is_empty() {
            return Err(ConfigError::new(name, "axis has no values"));
        }
        let key = match name {
            "lr" => "train.lr",
            "N" => "model.hidden_layers",
            "alpha" | "α" => "train.clip_new",
            "beta" | "β" => "train.clip_memory",
            "momentum" => "train.momentum",
            other => other,
        };
        Ok(Self {
            name: name.to_string(),
            key: key.to_string(),
            values,
        })
    }

    fn is_clip(&self) -> bool {
        self.key == "train.clip_new" || self.key == "train.clip_memory"
    }

    fn apply(&self, root: &mut toml::Value, value: &str) -> Result<(), ConfigError> {
        if self.is_clip() {
            set_clip(root, &self.key, value)
        } else {
            set_dotted(root, &self.key, parse_scalar(value))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    /// Axis values of this cell, in axis order.
    pub coords: Vec<String>,
    pub config: ExperimentConfig,
    pub hash: String,
}

/// Stable identity of a cell: the hash of its config without the output location.
pub fn cell_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    let digest = Sha256::digest(c.to_toml().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Expands `axes` over `base` in row-major order (last axis fastest).
pub fn expand(base: &ExperimentConfig, axes: &[Axis]) -> Result<Vec<Cell>, ConfigError> {
    let mut cells = vec![(Vec::<String>::new(), base.to_value())];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for (coords, value) in &cells {
            for v in &axis.values {
                let mut value = value.clone();
                axis.apply(&mut value, v)?;
                let mut coords = coords.clone();
                coords.push(v.clone());
                next.push((coords, value));
            }
        }
        cells = next;
    }
    cells
        .into_iter()
        .map(|(coords, value)| {
            let config = ExperimentConfig::from_value(value)?;
            Ok(Cell {
                hash: cell_hash(&config),
                coords,
                config,
            })
        })
        .collect()
}

pub fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join(format!("cell-{}", cell.hash))
}

#[derive(Debug, Clone)]
pub struct CellSummary {
    pub cell: Cell,
    pub final_mean: f64,
    pub final_std: f64,
    pub average_mean: f64,
    pub average_std: f64,
}

/// Runs every (cell, seed) pair on at most `jobs` threads and aggregates per cell.
pub fn run_grid(
    base: &ExperimentConfig,
    axes: &[Axis],
    jobs: usize,
    out: &Path,
) -> Result<Vec<CellSummary>> {
    let cells = expand(base, axes)?;
    let mut seen = HashMap::new();
    for c in &cells {
        if let Some(prev) = seen.insert(c.hash.clone(), &c.coords) {
            anyhow::bail!(
                "cells {prev:?} and {:?} resolve to the same configuration",
                c.coords
            );
        }
    }

    let mut datasets: HashMap<DatasetPaths, Arc<Datasets>> = HashMap::new();
    for c in &cells {
        let paths = c.config.dataset_paths()?;
        if let Entry::Vacant(slot) = datasets.entry(paths) {
            let data = run::load_datasets(slot.key())?;
            slot.insert(Arc::new(data));
        }
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for c in &cells {
        let dir = cell_dir(out, c);
        fs::create_dir_all(&dir)?;
        let mut echo = c.config.clone();
        echo.output_dir = dir.clone();
        fs::write(dir.join(run::CONFIG_ECHO), echo.to_toml())?;
    }

    let jobs_list: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building thread pool")?;
    let results: Vec<Result<(usize, u64, RunRecord)>> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(i, seed)| {
                let cell = &cells[i];
                let data = &datasets[&cell.config.dataset_paths()?];
                let scenario = run::scenario_for(&cell.config, data)?;
                let (record, store) = run::run_seed(&cell.config, data, &scenario, seed)
                    .with_context(|| format!("cell {} seed {seed}", cell.hash))?;
                run::write_seed(
                    &run::seed_dir(&cell_dir(out, cell), seed),
                    &record,
                    store.as_ref(),
                    data.train.num_classes(),
                )?;
                log::info!(
                    "cell {} {:?} seed {seed}: A_B {:.2}",
                    cell.hash,
                    cell.coords,
                    record.final_accuracy
                );
                Ok((i, seed, record))
            })
            .collect()
    });

    let mut per_cell: Vec<Vec<(u64, RunRecord)>> = vec![Vec::new(); cells.len()];
    for r in results {
        let (i, seed, record) = r?;
        per_cell[i].push((seed, record));
    }

    let mut summaries = Vec::with_capacity(cells.len());
    for (cell, mut runs) in cells.into_iter().zip(per_cell) {
        runs.sort_by_key(|(s, _)| *s);
        let seeds: Vec<u64> = runs.iter().map(|(s, _)| *s).collect();
        let records: Vec<RunRecord> = runs.into_iter().map(|(_, r)| r).collect();
        fs::write(
            cell_dir(out, &cell).join(run::SUMMARY_FILE),
            run::summary_csv(&seeds, &records)?,
        )?;
        let ab: Vec<f64> = records.iter().map(|r| r.final_accuracy).collect();
        let abar: Vec<f64> = records.iter().map(|r| r.average_accuracy).collect();
        let (final_mean, final_std) = mean_std(&ab)?;
        let (average_mean, average_std) = mean_std(&abar)?;
        summaries.push(CellSummary {
            cell,
            final_mean,
            final_std,
            average_mean,
            average_std,
        });
    }

    fs::write(out.join(GRID_CSV), grid_csv(axes, &summaries))?;
    fs::write(out.join(GRID_MD), grid_markdown(axes, &summaries))?;
    Ok(summaries)
}

pub fn grid_csv(axes: &[Axis], cells: &[CellSummary]) -> String {
    let mut out = String::from("cell");
    for a in axes {
        write!(out, ",{}", a.name).unwrap();
    }
    out.push_str(",seeds,A_B_mean,A_B_std,A_bar_mean,A_bar_std\n");
    for s in cells {
        out.push_str(&s.cell.hash);
        for c in &s.cell.coords {
            write!(out, ",{c}").unwrap();
        }
        writeln!(
            out,
            ",{},{:.4},{:.4},{:.4},{:.4}",
            s.cell.config.seeds.len(),
            s.final_mean,
            s.final_std,
            s.average_mean,
            s.average_std
        )
        .unwrap();
    }
    out
}

fn clip_cell(p: &ClipPolicy) -> String {
    match p {
        ClipPolicy::None => "not set".into(),
        ClipPolicy::GlobalL2Norm { threshold } => format!("{threshold}"),
        ClipPolicy::ElementClamp { threshold } => format!("{threshold} (clamp)"),
    }
}

/// Table with the method settings as leading columns, then `A_B` and `A_bar` as `mean ±std`.
pub fn grid_markdown(axes: &[Axis], cells: &[CellSummary]) -> String {
    let standard = [
        "train.lr",
        "model.hidden_layers",
        "train.clip_new",
        "train.clip_memory",
    ];
    let extra: Vec<&Axis> = axes
        .iter()
        .filter(|a| !standard.contains(&a.key.as_str()))
        .collect();
    let mut out = String::from("| Method | lr | Network | α | β |");
    for a in &extra {
        write!(out, " {} |", a.name).unwrap();
    }
    out.push_str(" A_B | Ā |\n|---|---|---|---|---|");
    for _ in &extra {
        out.push_str("---|");
    }
    out.push_str("---|---|\n");
    for s in cells {
        let cfg = &s.cell.config;
        let hidden = cfg.model.hidden();
        let network = if hidden.is_empty() {
            "in x out".to_string()
        } else if hidden.iter().all(|&w| w == hidden[0]) {
            format!("in x ({}x{}) x out", hidden[0], hidden.len())
        } else {
            format!("in x {hidden:?} x out")
        };
        write!(
            out,
            "| {} | {} | {} | {} | {} |",
            cfg.method,
            cfg.train.lr,
            network,
            clip_cell(&cfg.train.clip_new),
            clip_cell(&cfg.train.clip_memory)
        )
        .unwrap();
        for a in &extra {
            let i = axes.iter().position(|x| x.key == a.key).unwrap();
            write!(out, " {} |", s.cell.coords[i]).unwrap();
        }
        writeln!(
            out,
            " {:.2} ±{:.2} | {:.2} ±{:.2} |",
            s.final_mean, s.final_std, s.average_mean, s.average_std
        )
        .unwrap();
    }
    out
}
