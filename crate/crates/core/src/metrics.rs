//! Class-incremental accuracy bookkeeping.
//!
//! `A_b` is top-1 accuracy over the test rows of every class seen through
//! stage `b`, `A_B` is the last of these and `A_bar` their mean.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Percentage of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "accuracy",
            left: (predictions.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set"));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub fn average_accuracy(stage_accuracy: &[f64]) -> Result<f64> {
    if stage_accuracy.is_empty() {
        return Err(Error::UndefinedMetric("average accuracy of zero stages"));
    }
    Ok(stage_accuracy.iter().sum::<f64>() / stage_accuracy.len() as f64)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    let mean = average_accuracy(values)?;
    if values.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Ok((mean, var.sqrt()))
}

/// Accuracy records of one run, one entry per completed stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsMatrix {
    /// `A_1 .. A_b` in percent.
    pub stage_accuracy: Vec<f64>,
    /// Accuracy on the classes of the task just trained.
    pub new_task_accuracy: Vec<f64>,
    /// Row `b` holds the accuracy on each task `t <= b` after stage `b`.
    pub per_task_matrix: Vec<Vec<f64>>,
}

impl MetricsMatrix {
    /// Appends a stage. `per_task` must have one entry per task seen so far.
    pub fn push_stage(&mut self, stage_accuracy: f64, per_task: Vec<f64>) -> Result<()> {
        let stage = self.stage_accuracy.len();
        if per_task.len() != stage + 1 {
            return Err(Error::Consistency(format!(
                "stage {stage} needs {} per-task entries, got {}",
                stage + 1,
                per_task.len()
            )));
        }
        if std::iter::once(&stage_accuracy)
            .chain(&per_task)
            .any(|a| !(0.0..=100.0).contains(a))
        {
            return Err(Error::Consistency("accuracy outside [0, 100]".into()));
        }
        self.new_task_accuracy.push(*per_task.last().unwrap());
        self.stage_accuracy.push(stage_accuracy);
        self.per_task_matrix.push(per_task);
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_accuracy.len()
    }

    /// `A_B`.
    pub fn final_accuracy(&self) -> Result<f64> {
        self.stage_accuracy
            .last()
            .copied()
            .ok_or(Error::UndefinedMetric("final accuracy of zero stages"))
    }

    /// `A_bar`.
    pub fn average_accuracy(&self) -> Result<f64> {
        average_accuracy(&self.stage_accuracy)
    }

    /// Accuracy on task `task` after stage `stage`; `None` when `task > stage`.
    pub fn entry(&self, stage: usize, task: usize) -> Option<f64> {
        self.per_task_matrix.get(stage)?.get(task).copied()
    }
}

/// One line of the per-stage CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: usize,
    pub accuracy: f64,
    pub new_task_accuracy: f64,
    pub seen_classes: usize,
    pub wall_ms: u64,
}

pub const STAGE_CSV_HEADER: &str = "stage,A_b,new_task_acc,seen_classes,wall_ms";

/// `stage,A_b,new_task_acc,seen_classes,wall_ms`, stages numbered from 1,
/// accuracies with two decimals.
pub fn stage_csv(rows: &[StageRow]) -> String {
    let mut out = String::from(STAGE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{},{}",
            r.stage, r.accuracy, r.new_task_accuracy, r.seen_classes, r.wall_ms
        );
    }
    out
}
