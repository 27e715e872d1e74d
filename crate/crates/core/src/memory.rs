//! Per-class memory vectors.
//!
//! After a task finishes training, every class of that task is compressed
//! into one vector in the model's input space: a weighted mean of the class's
//! training inputs. Weights are uniform (`average`) or proportional to
//! `1 - p_true` under the post-task model (`confidence`), normalised to sum
//! to one so both modes stay on the scale of the inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset};
use crate::linalg::DenseMatrix;
use crate::model::{softmax_ce, MlpModel};
use crate::scenario::ClassSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceMode {
    #[default]
    Average,
    Confidence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryVector {
    pub class_id: u32,
    pub vector: Vec<f64>,
    /// Task that produced the vector; unknown for stores restored from disk.
    pub source_task: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    vectors: Vec<MemoryVector>,
    dim: usize,
    importance_mode: ImportanceMode,
}

/// `sum_i w_i * row_i` over the rows of `features` selected by `rows`.
fn weighted_sum(features: &DenseMatrix, rows: &[usize], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; features.cols()];
    for (&r, &w) in rows.iter().zip(weights) {
        for (o, &x) in out.iter_mut().zip(features.row(r)) {
            *o += w * x;
        }
    }
    out
}

fn class_rows(labels: &[u32], class: u32) -> Result<Vec<usize>> {
    let rows: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyClass { class });
    }
    Ok(rows)
}

/// One mean vector per class in `class_ids`.
pub fn build_memory_average(
    task_data: &LabeledDataset,
    class_ids: &ClassSet,
    source_task: usize,
) -> Result<Vec<MemoryVector>> {
    class_ids
        .iter()
        .map(|class| {
            let rows = class_rows(task_data.labels(), class)?;
            let w = vec![1.0 / rows.len() as f64; rows.len()];
            Ok(MemoryVector {
                class_id: class,
                vector: weighted_sum(task_data.features(), &rows, &w),
                source_task: Some(source_task),
            })
        })
        .collect()
}

/// Normalised `1 - p_true` weights for the given true-class probabilities.
///
/// Returns `None` when every sample is predicted with certainty, i.e. all raw
/// weights are zero.
pub fn confidence_weights(true_class_prob: &[f64]) -> Option<Vec<f64>> {
    let raw: Vec<f64> = true_class_prob.iter().map(|p| (1.0 - p).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return None;
    }
    Some(raw.into_iter().map(|w| w / total).collect())
}

/// One confidence-weighted vector per class, scored by `model` under `mask`.
///
/// A class whose samples all have `p_true == 1` falls back to the plain mean.
pub fn build_memory_confidence(
    task_data: &LabeledDataset,
    class_ids: &ClassSet,
    model: &MlpModel,
    mask: &ClassSet,
    source_task: usize,
) -> Result<Vec<MemoryVector>> {
    class_ids
        .iter()
        .map(|class| {
            let rows = class_rows(task_data.labels(), class)?;
            let batch = task_data.features().select_rows(&rows);
            let (logits, _) = model.forward(&batch, mask)?;
            let labels = vec![class; rows.len()];
            let ce = softmax_ce(&logits, &labels, mask)?;
            let weights = confidence_weights(&ce.true_class_prob).unwrap_or_else(|| {
                log::info!("class {class}: every sample has confidence 1, using the plain average");
                vec![1.0 / rows.len() as f64; rows.len()]
            });
            Ok(MemoryVector {
                class_id: class,
                vector: weighted_sum(task_data.features(), &rows, &weights),
                source_task: Some(source_task),
            })
        })
        .collect()
}

impl MemoryStore {
    pub fn new(dim: usize, importance_mode: ImportanceMode) -> Self {
        Self {
            vectors: Vec::new(),
            dim,
            importance_mode,
        }
    }

    pub fn importance_mode(&self) -> ImportanceMode {
        self.importance_mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[MemoryVector] {
        &self.vectors
    }

    pub fn class_ids(&self) -> ClassSet {
        self.vectors.iter().map(|v| v.class_id).collect()
    }

    /// Adds vectors; all-or-nothing if any class is already stored or a width is wrong.
    pub fn append(&mut self, vectors: Vec<MemoryVector>) -> Result<()> {
        let mut seen = self.class_ids();
        for v in &vectors {
            if v.vector.len() != self.dim {
                return Err(Error::Shape {
                    op: "MemoryStore::append",
                    left: (1, v.vector.len()),
                    right: (1, self.dim),
                });
            }
            if !v.vector.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("memory vector"));
            }
            if seen.contains(v.class_id) {
                return Err(Error::Protocol(format!(
                    "memory already holds a vector for class {}",
                    v.class_id
                )));
            }
            seen = seen.union(&ClassSet::new([v.class_id]));
        }
        self.vectors.extend(vectors);
        Ok(())
    }

    /// Every stored vector as one batch, with its class label.
    pub fn memory_batch(&self) -> (DenseMatrix, Vec<u32>) {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for v in &self.vectors {
            data.extend_from_slice(&v.vector);
        }
        let labels = self.vectors.iter().map(|v| v.class_id).collect();
        (
            DenseMatrix::from_vec(self.len(), self.dim, data).expect("widths checked on append"),
            labels,
        )
    }

    /// Storage cost measured in raw samples of shape `h x w x c`.
    pub fn footprint_in_samples(&self, sample_dims: (usize, usize, usize)) -> f64 {
        footprint_in_samples(self.len(), self.dim, sample_dims)
    }

    pub fn to_dataset(&self, num_classes: u32) -> Result<LabeledDataset> {
        let (features, labels) = self.memory_batch();
        LabeledDataset::new(features, labels, num_classes)
    }

    pub fn from_dataset(ds: &LabeledDataset, importance_mode: ImportanceMode) -> Result<Self> {
        let mut store = Self::new(ds.dim(), importance_mode);
        store.append(
            ds.features()
                .iter_rows()
                .zip(ds.labels())
                .map(|(row, &class_id)| MemoryVector {
                    class_id,
                    vector: row.to_vec(),
                    source_task: None,
                })
                .collect(),
        )?;
        Ok(store)
    }

    /// Writes the store as a `WBRF` feature file (vectors as rows, classes as labels).
    pub fn save(&self, path: &Path, num_classes: u32) -> Result<()> {
        data::write_feature_file(path, &self.to_dataset(num_classes)?)
    }

    pub fn load(path: &Path, importance_mode: ImportanceMode) -> Result<Self> {
        Self::from_dataset(&data::load_feature_file(path)?, importance_mode)
    }
}

/// `(num_vectors * vector_dim) / (h * w * c)`.
pub fn footprint_in_samples(
    num_vectors: usize,
    vector_dim: usize,
    sample_dims: (usize, usize, usize),
) -> f64 {
    let (h, w, c) = sample_dims;
    (num_vectors * vector_dim) as f64 / (h * w * c) as f64
}
