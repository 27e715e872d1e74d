//! Training loops: WBR, its finetune ablation, and the SimpleCIL baseline.
//!
//! For every mini-batch of the current task WBR takes two SGD steps through
//! one optimizer state:
//!
//! 1. a step on the batch, its gradient limited by `clip_new` (alpha);
//! 2. if the memory store is nonempty, a step on all memory vectors at once,
//!    its gradient limited by `clip_memory` (beta).
//!
//! Both steps use the softmax over all classes seen so far. Memory vectors
//! for a task are built after its training loop finishes, so the replayed
//! batch never contains classes of the task in progress.
//!
//! Randomness: the model is initialised from `SeededRng::new(seed)` (see
//! [`init_model`]) and batch order comes from a separate stream
//! [`batch_rng`]`(seed)` that shuffles the task's training rows once per epoch.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::linalg::{l2_norm, SeededRng};
use crate::memory::{build_memory_average, build_memory_confidence, ImportanceMode, MemoryStore};
use crate::metrics::{accuracy, MetricsMatrix, StageRow};
use crate::model::{class_centers, softmax_ce, Gradients, MlpModel, PrototypeClassifier};
use crate::optim::{clip_in_place, ClipPolicy, SgdState};
use crate::scenario::{ClassSet, Scenario, TaskSplit};
use crate::{Error, Result};

const BATCH_STREAM: u64 = 0x6261_7463_685f_7264;
const EVAL_CHUNK: usize = 1024;

/// How the new-data and memory gradients are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// Two sequential SGD steps per batch: new data, then memory.
    #[default]
    Alternating,
    /// One SGD step on the sum of the separately clipped gradients.
    JointLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Wbr,
    Finetune,
    Simplecil,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Wbr => "WBR",
            Method::Finetune => "Finetune",
            Method::Simplecil => "SimpleCIL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Alpha: limit on the new-data gradient.
    pub clip_new: ClipPolicy,
    /// Beta: limit on the memory gradient.
    pub clip_memory: ClipPolicy,
    pub importance_mode: ImportanceMode,
    pub seed: u64,
    pub replay_enabled: bool,
    pub update_mode: UpdateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs_per_task: 10,
            batch_size: 16,
            momentum: 0.0,
            clip_new: ClipPolicy::None,
            clip_memory: ClipPolicy::None,
            importance_mode: ImportanceMode::Average,
            seed: 0,
            replay_enabled: true,
            update_mode: UpdateMode::Alternating,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs_per_task == 0 {
            return Err(Error::Config("epochs_per_task must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        self.clip_new.validate()?;
        self.clip_memory.validate()
    }
}

/// Model initialisation for a run seeded with `seed`.
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<MlpModel> {
    MlpModel::new(layer_dims, &mut SeededRng::new(seed))
}

/// Batch-order stream for a run seeded with `seed`.
pub fn batch_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed ^ BATCH_STREAM)
}

/// Gradient statistics of one task's training loop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub new_steps: usize,
    pub memory_steps: usize,
    /// Mean pre-clip joint norm of the new-data gradients.
    pub mean_new_grad_norm: f64,
    /// Mean pre-clip joint norm of the memory gradients.
    pub mean_memory_grad_norm: f64,
}

fn loss_gradients(
    model: &MlpModel,
    batch: &crate::linalg::DenseMatrix,
    labels: &[u32],
    mask: &ClassSet,
) -> Result<Gradients> {
    let (logits, cache) = model.forward(batch, mask)?;
    let ce = softmax_ce(&logits, labels, mask)?;
    model.backward(&cache, &ce.d_logits)
}

/// Trains `model` on one task, interleaving memory replay per mini-batch.
///
/// `mask` is the set of classes seen through this task. Every new-data batch
/// is drawn from `task.train_rows`, and each of its labels is checked against
/// the task's classes.
#[allow(clippy::too_many_arguments)]
pub fn wbr_train_task(
    model: &mut MlpModel,
    task: &TaskSplit,
    train: &LabeledDataset,
    store: &MemoryStore,
    mask: &ClassSet,
    cfg: &TrainConfig,
    state: &mut SgdState,
    rng: &mut SeededRng,
) -> Result<StepStats> {
    if let Some(c) = store
        .class_ids()
        .iter()
        .find(|&c| task.class_ids.contains(c))
    {
        return Err(Error::Protocol(format!(
            "memory holds class {c}, which belongs to task {}",
            task.task_index
        )));
    }
    let replay = cfg.replay_enabled && !store.is_empty();
    let (mem_batch, mem_labels) = store.memory_batch();

    let mut stats = StepStats::default();
    let (mut new_norm_sum, mut mem_norm_sum) = (0.0, 0.0);
    for _ in 0..cfg.epochs_per_task {
        let order = rng.shuffle(task.train_rows.len());
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<usize> = chunk.iter().map(|&i| task.train_rows[i]).collect();
            let labels: Vec<u32> = rows.iter().map(|&r| train.labels()[r]).collect();
            if let Some(&l) = labels.iter().find(|&&l| !task.class_ids.contains(l)) {
                return Err(Error::Protocol(format!(
                    "batch of task {} contains label {l} from another task",
                    task.task_index
                )));
            }
            let batch = train.features().select_rows(&rows);

            let mut g_new = loss_gradients(model, &batch, &labels, mask)?;
            new_norm_sum += g_new.norm();
            stats.new_steps += 1;
            clip_in_place(&mut g_new, &cfg.clip_new)?;

            match (replay, cfg.update_mode) {
                (false, _) => state.step(model, &g_new)?,
                (true, UpdateMode::Alternating) => {
                    state.step(model, &g_new)?;
                    let mut g_mem = loss_gradients(model, &mem_batch, &mem_labels, mask)?;
                    mem_norm_sum += g_mem.norm();
                    stats.memory_steps += 1;
                    clip_in_place(&mut g_mem, &cfg.clip_memory)?;
                    state.step(model, &g_mem)?;
                }
                (true, UpdateMode::JointLoss) => {
                    let mut g_mem = loss_gradients(model, &mem_batch, &mem_labels, mask)?;
                    mem_norm_sum += g_mem.norm();
                    stats.memory_steps += 1;
                    clip_in_place(&mut g_mem, &cfg.clip_memory)?;
                    for (a, b) in g_new.slices_mut().zip(g_mem.slices()) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    }
                    state.step(model, &g_new)?;
                }
            }
        }
    }
    if stats.new_steps > 0 {
        stats.mean_new_grad_norm = new_norm_sum / stats.new_steps as f64;
    }
    if stats.memory_steps > 0 {
        stats.mean_memory_grad_norm = mem_norm_sum / stats.memory_steps as f64;
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("model parameters after training"));
    }
    Ok(stats)
}

/// Predictions of `model` on the given test rows, restricted to `mask`.
pub fn predict_rows(
    model: &MlpModel,
    data: &LabeledDataset,
    rows: &[usize],
    mask: &ClassSet,
) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        out.extend(model.predict(&data.features().select_rows(chunk), mask)?);
    }
    Ok(out)
}

/// Row and layer norms of `after - before`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDelta {
    /// Norm of each layer's weight difference.
    pub layer_norms: Vec<f64>,
    /// Norm of each output row's weight difference, per layer. For the last
    /// layer, row `j` is class `j`.
    pub row_norms: Vec<Vec<f64>>,
}

impl WeightDelta {
    pub fn class_row_norms(&self) -> &[f64] {
        self.row_norms.last().expect("at least one layer")
    }

    /// Mean final-layer row delta of `new` classes over that of `old` classes.
    pub fn balance_ratio(&self, new: &ClassSet, old: &ClassSet) -> Option<f64> {
        let rows = self.class_row_norms();
        let mean = |s: &ClassSet| {
            (!s.is_empty())
                .then(|| s.iter().map(|c| rows[c as usize]).sum::<f64>() / s.len() as f64)
        };
        let (n, o) = (mean(new)?, mean(old)?);
        (o > 0.0).then(|| n / o)
    }
}

pub fn weight_delta_probe(before: &MlpModel, after: &MlpModel) -> Result<WeightDelta> {
    if before.layer_dims() != after.layer_dims() {
        return Err(Error::Shape {
            op: "weight_delta_probe",
            left: (before.num_layers(), before.input_dim()),
            right: (after.num_layers(), after.input_dim()),
        });
    }
    let mut layer_norms = Vec::new();
    let mut row_norms = Vec::new();
    for (wb, wa) in before.weights().iter().zip(after.weights()) {
        let mut diff = wa.clone();
        diff.axpy(-1.0, wb)?;
        layer_norms.push(diff.l2_norm());
        row_norms.push(diff.iter_rows().map(l2_norm).collect());
    }
    Ok(WeightDelta {
        layer_norms,
        row_norms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub class_order: Vec<u32>,
    pub base_size: usize,
    pub increment: usize,
    pub num_tasks: usize,
}

impl From<&Scenario> for ScenarioSummary {
    fn from(s: &Scenario) -> Self {
        Self {
            class_order: s.class_order.clone(),
            base_size: s.base_size,
            increment: s.increment,
            num_tasks: s.num_tasks(),
        }
    }
}

/// Per-stage diagnostics that are not accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub steps: StepStats,
    pub delta: Option<WeightDelta>,
    /// Mean new-class over mean old-class final-layer row delta for this stage.
    pub balance_ratio: Option<f64>,
    pub memory_vectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub layer_dims: Vec<usize>,
    pub num_parameters: usize,
    pub layer_weight_norms: Vec<f64>,
}

impl From<&MlpModel> for ModelSummary {
    fn from(m: &MlpModel) -> Self {
        Self {
            layer_dims: m.layer_dims().to_vec(),
            num_parameters: m.num_parameters(),
            layer_weight_norms: m.weights().iter().map(|w| w.l2_norm()).collect(),
        }
    }
}

/// Everything a run produces, serialised as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub config: TrainConfig,
    pub scenario: ScenarioSummary,
    pub metrics: MetricsMatrix,
    pub stages: Vec<StageRow>,
    pub final_accuracy: f64,
    pub average_accuracy: f64,
    pub diagnostics: Vec<StageDiagnostics>,
    pub model: Option<ModelSummary>,
}

impl RunRecord {
    pub fn stage_csv(&self) -> String {
        crate::metrics::stage_csv(&self.stages)
    }
}

/// Accuracy over all seen test rows, and per task.
fn evaluate_stage(
    predict: impl Fn(&[usize]) -> Result<Vec<u32>>,
    scenario: &Scenario,
    test: &LabeledDataset,
    stage: usize,
) -> Result<(f64, Vec<f64>)> {
    let rows = scenario.seen_test_rows(stage)?;
    let preds = predict(&rows)?;
    let labels: Vec<u32> = rows.iter().map(|&r| test.labels()[r]).collect();
    let overall = accuracy(&preds, &labels)?;

    let mut per_task = Vec::with_capacity(stage + 1);
    for task in &scenario.tasks[..=stage] {
        let (mut correct, mut total) = (0usize, 0usize);
        for (&r, &p) in rows.iter().zip(&preds) {
            if task.class_ids.contains(test.labels()[r]) {
                total += 1;
                correct += usize::from(p == test.labels()[r]);
            }
        }
        if total == 0 {
            return Err(Error::UndefinedMetric("task with no test rows"));
        }
        per_task.push(100.0 * correct as f64 / total as f64);
    }
    Ok((overall, per_task))
}

fn finish(
    method: Method,
    cfg: &TrainConfig,
    scenario: &Scenario,
    metrics: MetricsMatrix,
    stages: Vec<StageRow>,
    diagnostics: Vec<StageDiagnostics>,
    model: Option<ModelSummary>,
) -> Result<RunRecord> {
    Ok(RunRecord {
        method,
        config: cfg.clone(),
        scenario: scenario.into(),
        final_accuracy: metrics.final_accuracy()?,
        average_accuracy: metrics.average_accuracy()?,
        metrics,
        stages,
        diagnostics,
        model,
    })
}

/// Runs every task of `scenario` in order: train, build memory, evaluate.
///
/// With `replay_enabled == false` this is the finetune baseline.
pub fn run_continual(
    model: &mut MlpModel,
    scenario: &Scenario,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    run_continual_with_memory(model, scenario, train, test, cfg).map(|(record, _)| record)
}

/// [`run_continual`], also returning the final memory store.
pub fn run_continual_with_memory(
    model: &mut MlpModel,
    scenario: &Scenario,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(RunRecord, MemoryStore)> {
    cfg.validate()?;
    if model.output_dim() < scenario.num_classes as usize {
        return Err(Error::Config(format!(
            "model has {} outputs but the scenario has {} classes",
            model.output_dim(),
            scenario.num_classes
        )));
    }
    if model.input_dim() != train.dim() || train.dim() != test.dim() {
        return Err(Error::Config(format!(
            "model input {} vs train dim {} vs test dim {}",
            model.input_dim(),
            train.dim(),
            test.dim()
        )));
    }

    let mut state = SgdState::new(cfg.lr, cfg.momentum)?;
    let mut rng = batch_rng(cfg.seed);
    let mut store = MemoryStore::new(model.input_dim(), cfg.importance_mode);
    let mut metrics = MetricsMatrix::default();
    let mut stages = Vec::new();
    let mut diagnostics = Vec::new();
    let mut seen = ClassSet::default();

    for task in &scenario.tasks {
        let b = task.task_index;
        let started = Instant::now();
        let old = seen.clone();
        seen = seen.union(&task.class_ids);
        let before = model.clone();

        let steps = wbr_train_task(model, task, train, &store, &seen, cfg, &mut state, &mut rng)?;

        if cfg.replay_enabled {
            let task_data = train.subset(&task.train_rows);
            let vectors = match cfg.importance_mode {
                ImportanceMode::Average => build_memory_average(&task_data, &task.class_ids, b)?,
                ImportanceMode::Confidence => {
                    build_memory_confidence(&task_data, &task.class_ids, model, &seen, b)?
                }
            };
            store.append(vectors)?;
        }

        let (acc, per_task) = evaluate_stage(
            |rows| predict_rows(model, test, rows, &seen),
            scenario,
            test,
            b,
        )?;
        let new_acc = *per_task.last().unwrap();
        metrics.push_stage(acc, per_task)?;
        let wall_ms = started.elapsed().as_millis() as u64;
        stages.push(StageRow {
            stage: b + 1,
            accuracy: acc,
            new_task_accuracy: new_acc,
            seen_classes: seen.len(),
            wall_ms,
        });

        let delta = weight_delta_probe(&before, model)?;
        diagnostics.push(StageDiagnostics {
            steps,
            balance_ratio: delta.balance_ratio(&task.class_ids, &old),
            delta: Some(delta),
            memory_vectors: store.len(),
        });
        log::info!(
            "task {}/{}: A_b {:.2} new {:.2} ({} ms)",
            b + 1,
            scenario.num_tasks(),
            acc,
            new_acc,
            wall_ms
        );
    }

    let method = if cfg.replay_enabled {
        Method::Wbr
    } else {
        Method::Finetune
    };
    let record = finish(
        method,
        cfg,
        scenario,
        metrics,
        stages,
        diagnostics,
        Some(ModelSummary::from(&*model)),
    )?;
    Ok((record, store))
}

/// Training-free baseline: class means of the (frozen) features, cosine nearest center.
pub fn simplecil_run(
    train: &LabeledDataset,
    test: &LabeledDataset,
    scenario: &Scenario,
) -> Result<RunRecord> {
    let mut classifier = PrototypeClassifier::empty(train.dim());
    let mut metrics = MetricsMatrix::default();
    let mut stages = Vec::new();
    let mut diagnostics = Vec::new();
    for task in &scenario.tasks {
        let started = Instant::now();
        let task_data = train.subset(&task.train_rows);
        let centers = class_centers(
            task_data.features(),
            task_data.labels(),
            task.class_ids.as_slice(),
        )?;
        classifier.extend(&centers)?;

        let (acc, per_task) = evaluate_stage(
            |rows| classifier.predict(&test.features().select_rows(rows)),
            scenario,
            test,
            task.task_index,
        )?;
        let new_acc = *per_task.last().unwrap();
        metrics.push_stage(acc, per_task)?;
        stages.push(StageRow {
            stage: task.task_index + 1,
            accuracy: acc,
            new_task_accuracy: new_acc,
            seen_classes: classifier.len(),
            wall_ms: started.elapsed().as_millis() as u64,
        });
        diagnostics.push(StageDiagnostics {
            steps: StepStats::default(),
            delta: None,
            balance_ratio: None,
            memory_vectors: 0,
        });
    }
    finish(
        Method::Simplecil,
        &TrainConfig::default(),
        scenario,
        metrics,
        stages,
        diagnostics,
        None,
    )
}
