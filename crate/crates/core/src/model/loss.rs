use crate::linalg::DenseMatrix;
use crate::scenario::ClassSet;
use crate::{Error, Result};

/// Result of [`softmax_ce`].
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. the logits; zero outside the mask.
    pub d_logits: DenseMatrix,
    /// Masked softmax probability of each row's true class.
    pub true_class_prob: Vec<f64>,
}

/// Softmax cross-entropy over the classes in `mask` only.
///
/// Logits of classes outside the mask take no part in the normaliser and
/// receive zero gradient. An empty mask means "all outputs".
pub fn softmax_ce(logits: &DenseMatrix, labels: &[u32], mask: &ClassSet) -> Result<CrossEntropy> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::Shape {
            op: "softmax_ce",
            left: (n, k),
            right: (labels.len(), 1),
        });
    }
    let active: Vec<usize> = if mask.is_empty() {
        (0..k).collect()
    } else {
        mask.iter().map(|c| c as usize).collect()
    };
    if let Some(&c) = active.iter().find(|&&c| c >= k) {
        return Err(Error::Protocol(format!(
            "mask class {c} outside {k} logits"
        )));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&l| !(mask.is_empty() && (l as usize) < k) && !mask.contains(l))
    {
        return Err(Error::Protocol(format!(
            "label {bad} is not in the seen-class mask {:?}",
            mask.as_slice()
        )));
    }

    let mut d_logits = DenseMatrix::zeros(n, k);
    let mut true_class_prob = Vec::with_capacity(n);
    let mut total = 0.0;
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut probs = vec![0.0; active.len()];
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = active
            .iter()
            .map(|&c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, &c) in probs.iter_mut().zip(&active) {
            *p = (row[c] - max).exp();
            sum += *p;
        }
        let log_sum = sum.ln() + max;
        total += log_sum - row[label as usize];
        let out = d_logits.row_mut(i);
        for (p, &c) in probs.iter().zip(&active) {
            let prob = p / sum;
            out[c] = prob * inv_n;
            if c == label as usize {
                true_class_prob.push(prob);
                out[c] -= inv_n;
            }
        }
    }
    Ok(CrossEntropy {
        loss: total * inv_n,
        d_logits,
        true_class_prob,
    })
}
