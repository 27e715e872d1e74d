//! Merging finished runs into one comparison table and curve series.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Result;
use wbr::metrics::mean_std;
use wbr::trainer::{Method, RunRecord, ScenarioSummary};

use crate::run::read_records;

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const CURVES_CSV: &str = "curves.csv";

#[derive(Debug, thiserror::Error)]
#[error("runs are not comparable: {0}")]
pub struct Incomparable(pub String);

/// All seeds of one run directory.
#[derive(Debug, Clone)]
pub struct RunGroup {
    pub label: String,
    pub dir: PathBuf,
    pub method: Method,
    /// `WBR,α=0.5`, `SimpleCIL`, ...
    pub method_label: String,
    pub scenario: ScenarioSummary,
    pub seeds: Vec<u64>,
    pub final_mean: f64,
    pub final_std: f64,
    pub average_mean: f64,
    pub average_std: f64,
    /// Mean `A_b` per stage across seeds.
    pub curve: Vec<f64>,
}

impl RunGroup {
    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_records(dir)?;
        let (first_seed, first) = &records[0];
        for (seed, r) in &records[1..] {
            if r.scenario != first.scenario {
                return Err(Incomparable(format!(
                    "{}: seed {seed} and seed {first_seed} use different scenarios",
                    dir.display()
                ))
                .into());
            }
        }
        let ab: Vec<f64> = records.iter().map(|(_, r)| r.final_accuracy).collect();
        let abar: Vec<f64> = records.iter().map(|(_, r)| r.average_accuracy).collect();
        let (final_mean, final_std) = mean_std(&ab)?;
        let (average_mean, average_std) = mean_std(&abar)?;
        let stages = first.metrics.num_stages();
        let curve = (0..stages)
            .map(|b| {
                let v: Vec<f64> = records
                    .iter()
                    .map(|(_, r)| r.metrics.stage_accuracy[b])
                    .collect();
                mean_std(&v).map(|(m, _)| m)
            })
            .collect::<wbr::Result<Vec<f64>>>()?;
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            label,
            dir: dir.to_path_buf(),
            method: first.method,
            method_label: describe(first),
            scenario: first.scenario.clone(),
            seeds: records.iter().map(|(s, _)| *s).collect(),
            final_mean,
            final_std,
            average_mean,
            average_std,
            curve,
        })
    }
}

fn describe(r: &RunRecord) -> String {
    match r.method {
        Method::Simplecil | Method::Finetune => r.method.to_string(),
        Method::Wbr => {
            let mut s = String::from("WBR");
            if r.config.clip_new.threshold().is_some() {
                write!(s, ",α={}", r.config.clip_new.threshold().unwrap()).unwrap();
            }
            if r.config.clip_memory.threshold().is_some() {
                write!(s, ",β={}", r.config.clip_memory.threshold().unwrap()).unwrap();
            }
            s
        }
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub groups: Vec<RunGroup>,
    /// Index into `groups` of the baseline, when deltas are shown.
    pub baseline: Option<usize>,
}

/// Loads `dirs` (and `baseline` if not among them) and checks they share one scenario.
pub fn build(dirs: &[PathBuf], baseline: Option<&Path>) -> Result<Report> {
    let mut all: Vec<PathBuf> = dirs.to_vec();
    if let Some(b) = baseline {
        if !all.iter().any(|d| same_dir(d, b)) {
            all.insert(0, b.to_path_buf());
        }
    }
    if all.is_empty() {
        anyhow::bail!("no run directories given");
    }
    let groups = all
        .iter()
        .map(|d| RunGroup::load(d))
        .collect::<Result<Vec<_>>>()?;
    for g in &groups[1..] {
        check_comparable(&groups[0], g)?;
    }
    let baseline = match baseline {
        Some(b) if groups.len() > 1 => groups.iter().position(|g| same_dir(&g.dir, b)),
        _ => None,
    };
    Ok(Report { groups, baseline })
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn check_comparable(a: &RunGroup, b: &RunGroup) -> Result<(), Incomparable> {
    let (x, y) = (&a.scenario, &b.scenario);
    if x.class_order != y.class_order {
        return Err(Incomparable(format!(
            "{} and {} use different class orders",
            a.label, b.label
        )));
    }
    if (x.base_size, x.increment, x.num_tasks) != (y.base_size, y.increment, y.num_tasks) {
        return Err(Incomparable(format!(
            "{} is B{}-Inc{} over {} tasks, {} is B{}-Inc{} over {} tasks",
            a.label,
            x.base_size,
            x.increment,
            x.num_tasks,
            b.label,
            y.base_size,
            y.increment,
            y.num_tasks
        )));
    }
    Ok(())
}

/// Signed delta with two decimals: `+3.91`, `-0.40`.
pub fn format_delta(d: f64) -> String {
    format!("{d:+.2}")
}

impl Report {
    fn deltas(&self, g: &RunGroup) -> Option<(f64, f64)> {
        let b = &self.groups[self.baseline?];
        Some((g.final_mean - b.final_mean, g.average_mean - b.average_mean))
    }

    pub fn markdown(&self) -> String {
        let with_delta = self.baseline.is_some();
        let mut out = String::from("| Run | Method | Seeds | A_B | Ā |");
        if with_delta {
            out.push_str(" ΔA_B | ΔĀ |");
        }
        out.push_str("\n|---|---|---|---|---|");
        if with_delta {
            out.push_str("---|---|");
        }
        out.push('\n');
        for (i, g) in self.groups.iter().enumerate() {
            write!(
                out,
                "| {} | {} | {} | {:.2} ±{:.2} | {:.2} ±{:.2} |",
                g.label,
                g.method_label,
                g.seeds.len(),
                g.final_mean,
                g.final_std,
                g.average_mean,
                g.average_std
            )
            .unwrap();
            if with_delta {
                if Some(i) == self.baseline {
                    out.push_str(" baseline | baseline |");
                } else {
                    let (d1, d2) = self.deltas(g).unwrap();
                    write!(out, " {} | {} |", format_delta(d1), format_delta(d2)).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn csv(&self) -> String {
        let with_delta = self.baseline.is_some();
        let mut out = String::from("run,method,seeds,A_B_mean,A_B_std,A_bar_mean,A_bar_std");
        if with_delta {
            out.push_str(",delta_A_B,delta_A_bar");
        }
        out.push('\n');
        for g in &self.groups {
            write!(
                out,
                "{},\"{}\",{},{:.4},{:.4},{:.4},{:.4}",
                g.label,
                g.method_label,
                g.seeds.len(),
                g.final_mean,
                g.final_std,
                g.average_mean,
                g.average_std
            )
            .unwrap();
            if let Some((d1, d2)) = self.deltas(g) {
                write!(out, ",{},{}", format_delta(d1), format_delta(d2)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Long-format series `run,stage,A_b` for accuracy-vs-stage plots.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("run,stage,A_b\n");
        for g in &self.groups {
            for (b, a) in g.curve.iter().enumerate() {
                writeln!(out, "{},{},{a:.4}", g.label, b + 1).unwrap();
            }
        }
        out
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join(REPORT_MD), self.markdown())?;
        std::fs::write(out.join(REPORT_CSV), self.csv())?;
        std::fs::write(out.join(CURVES_CSV), self.curves_csv())?;
        Ok(())
    }
}
