use crate::linalg::{dot, l2_norm, DenseMatrix};
use crate::{Error, Result};

/// Class-mean prototypes scored by cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeClassifier {
    centers: DenseMatrix,
    class_ids: Vec<u32>,
}

/// Mean feature row of each class in `class_ids`, in that order.
pub fn class_centers(
    features: &DenseMatrix,
    labels: &[u32],
    class_ids: &[u32],
) -> Result<PrototypeClassifier> {
    if features.rows() != labels.len() {
        return Err(Error::Shape {
            op: "class_centers",
            left: features.shape(),
            right: (labels.len(), 1),
        });
    }
    let dim = features.cols();
    let mut centers = DenseMatrix::zeros(class_ids.len(), dim);
    for (slot, &class) in class_ids.iter().enumerate() {
        let mut count = 0usize;
        let center = centers.row_mut(slot);
        for (row, _) in features
            .iter_rows()
            .zip(labels)
            .filter(|(_, &l)| l == class)
        {
            for (c, &x) in center.iter_mut().zip(row) {
                *c += x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyClass { class });
        }
        let inv = 1.0 / count as f64;
        center.iter_mut().for_each(|c| *c *= inv);
    }
    Ok(PrototypeClassifier {
        centers,
        class_ids: class_ids.to_vec(),
    })
}

/// Cosine of the angle between `a` and `b`; zero when either is the zero vector.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

impl PrototypeClassifier {
    pub fn empty(dim: usize) -> Self {
        Self {
            centers: DenseMatrix::zeros(0, dim),
            class_ids: Vec::new(),
        }
    }

    pub fn centers(&self) -> &DenseMatrix {
        &self.centers
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn center(&self, class: u32) -> Option<&[f64]> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .map(|i| self.centers.row(i))
    }

    /// Appends the prototypes of `other`; a class already present is a protocol error.
    pub fn extend(&mut self, other: &PrototypeClassifier) -> Result<()> {
        if other.centers.cols() != self.centers.cols() && !self.is_empty() {
            return Err(Error::Shape {
                op: "PrototypeClassifier::extend",
                left: self.centers.shape(),
                right: other.centers.shape(),
            });
        }
        if let Some(&dup) = other.class_ids.iter().find(|c| self.class_ids.contains(c)) {
            return Err(Error::Protocol(format!(
                "class {dup} already has a prototype"
            )));
        }
        let mut rows: Vec<Vec<f64>> = self.centers.iter_rows().map(<[f64]>::to_vec).collect();
        rows.extend(other.centers.iter_rows().map(<[f64]>::to_vec));
        self.centers = if rows.is_empty() {
            DenseMatrix::zeros(0, other.centers.cols())
        } else {
            DenseMatrix::from_rows(&rows)?
        };
        self.class_ids.extend_from_slice(&other.class_ids);
        Ok(())
    }

    /// Class with the highest cosine similarity for each row; ties go to the earlier prototype.
    pub fn predict(&self, batch: &DenseMatrix) -> Result<Vec<u32>> {
        if self.is_empty() {
            return Err(Error::UndefinedMetric("no prototypes to classify against"));
        }
        if batch.cols() != self.centers.cols() {
            return Err(Error::Shape {
                op: "PrototypeClassifier::predict",
                left: batch.shape(),
                right: self.centers.shape(),
            });
        }
        let center_norms: Vec<f64> = self.centers.iter_rows().map(l2_norm).collect();
        let scores = batch.matmul_nt(&self.centers)?;
        Ok(batch
            .iter_rows()
            .enumerate()
            .map(|(i, x)| {
                let nx = l2_norm(x);
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (j, &nc) in center_norms.iter().enumerate() {
                    let s = if nx == 0.0 || nc == 0.0 {
                        0.0
                    } else {
                        scores.get(i, j) / (nx * nc)
                    };
                    if s > best_score {
                        best_score = s;
                        best = j;
                    }
                }
                self.class_ids[best]
            })
            .collect())
    }
}
