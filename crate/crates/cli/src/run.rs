//! Executing one configuration over its seeds and writing the artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use wbr::data::{load_feature_file, load_mnist_idx, LabeledDataset};
use wbr::memory::MemoryStore;
use wbr::scenario::{build_scenario, Scenario};
use wbr::trainer::{init_model, run_continual_with_memory, simplecil_run, Method, RunRecord};

use crate::config::{DatasetPaths, ExperimentConfig};

pub const RECORD_FILE: &str = "record.json";
pub const STAGES_FILE: &str = "stages.csv";
pub const MEMORY_FILE: &str = "memory.wbrf";
pub const CONFIG_ECHO: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";

pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_datasets(paths: &DatasetPaths) -> Result<Datasets> {
    let (train, test) = match paths {
        DatasetPaths::Mnist { dir } => (
            load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?,
            load_mnist_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?,
        ),
        DatasetPaths::Features { train, test } => {
            (load_feature_file(train)?, load_feature_file(test)?)
        }
    };
    log::info!(
        "loaded {} train / {} test rows, dim {}, {} classes",
        train.len(),
        test.len(),
        train.dim(),
        train.num_classes()
    );
    Ok(Datasets { train, test })
}

pub fn scenario_for(cfg: &ExperimentConfig, data: &Datasets) -> Result<Scenario> {
    Ok(build_scenario(
        &data.train,
        &data.test,
        cfg.scenario.base,
        cfg.scenario.increment,
        cfg.scenario.order_seed,
    )?)
}

/// One seed of one configuration.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &Datasets,
    scenario: &Scenario,
    seed: u64,
) -> Result<(RunRecord, Option<MemoryStore>)> {
    match cfg.method {
        Method::Simplecil => Ok((simplecil_run(&data.train, &data.test, scenario)?, None)),
        Method::Wbr | Method::Finetune => {
            let mut dims = vec![data.train.dim()];
            dims.extend(cfg.model.hidden());
            dims.push(data.train.num_classes() as usize);
            let mut model = init_model(&dims, seed)?;
            let train_cfg = cfg.train_for_seed(seed);
            let (record, store) = run_continual_with_memory(
                &mut model,
                scenario,
                &data.train,
                &data.test,
                &train_cfg,
            )?;
            Ok((record, (!store.is_empty()).then_some(store)))
        }
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Writes `record.json`, `stages.csv` and, when present, `memory.wbrf`.
pub fn write_seed(
    dir: &Path,
    record: &RunRecord,
    store: Option<&MemoryStore>,
    num_classes: u32,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let json = serde_json::to_string_pretty(record)?;
    fs::write(dir.join(RECORD_FILE), json)?;
    fs::write(dir.join(STAGES_FILE), record.stage_csv())?;
    if let Some(store) = store {
        store.save(&dir.join(MEMORY_FILE), num_classes)?;
    }
    Ok(())
}

/// `seed,A_B,A_bar` for every seed, then the mean and sample std rows.
pub fn summary_csv(seeds: &[u64], records: &[RunRecord]) -> Result<String> {
    use std::fmt::Write as _;
    let mut out = String::from("seed,A_B,A_bar\n");
    for (s, r) in seeds.iter().zip(records) {
        writeln!(out, "{s},{:.2},{:.2}", r.final_accuracy, r.average_accuracy)?;
    }
    let ab: Vec<f64> = records.iter().map(|r| r.final_accuracy).collect();
    let abar: Vec<f64> = records.iter().map(|r| r.average_accuracy).collect();
    let (m1, s1) = wbr::metrics::mean_std(&ab)?;
    let (m2, s2) = wbr::metrics::mean_std(&abar)?;
    writeln!(out, "mean,{m1:.2},{m2:.2}")?;
    writeln!(out, "std,{s1:.2},{s2:.2}")?;
    Ok(out)
}

/// Runs every seed of `cfg` sequentially into `out`.
pub fn run_config(cfg: &ExperimentConfig, data: &Datasets, out: &Path) -> Result<Vec<RunRecord>> {
    let scenario = scenario_for(cfg, data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut echo = cfg.clone();
    echo.output_dir = out.to_path_buf();
    fs::write(out.join(CONFIG_ECHO), echo.to_toml())?;

    let mut records = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (record, store) =
            run_seed(cfg, data, &scenario, seed).with_context(|| format!("seed {seed}"))?;
        write_seed(
            &seed_dir(out, seed),
            &record,
            store.as_ref(),
            data.train.num_classes(),
        )?;
        log::info!(
            "seed {seed}: A_B {:.2}, A_bar {:.2}",
            record.final_accuracy,
            record.average_accuracy
        );
        records.push(record);
    }
    fs::write(out.join(SUMMARY_FILE), summary_csv(&cfg.seeds, &records)?)?;
    Ok(records)
}

/// Reads every `seed-*/record.json` under `dir`, ordered by seed.
pub fn read_records(dir: &Path) -> Result<Vec<(u64, RunRecord)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(seed) = name.to_str().and_then(|n| n.strip_prefix("seed-")) else {
            continue;
        };
        let Ok(seed) = seed.parse::<u64>() else {
            continue;
        };
        let path = entry.path().join(RECORD_FILE);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let record: RunRecord =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        out.push((seed, record));
    }
    if out.is_empty() {
        anyhow::bail!("{} holds no seed-*/{RECORD_FILE}", dir.display());
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}
