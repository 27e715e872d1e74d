#![allow(dead_code)]

use std::path::PathBuf;

use wbr::data::{load_mnist_idx, LabeledDataset};
use wbr::linalg::{DenseMatrix, SeededRng};
use wbr::model::{softmax_ce, MlpModel};
use wbr::scenario::ClassSet;

/// `$WBR_DATA_DIR/mnist`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("WBR_DATA_DIR") {
        Some(root) => PathBuf::from(root).join("mnist"),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

pub fn load_mnist() -> Result<(LabeledDataset, LabeledDataset), String> {
    let dir = mnist_dir();
    let load = |img: &str, lbl: &str| {
        load_mnist_idx(&dir.join(img), &dir.join(lbl)).map_err(|e| {
            format!(
                "MNIST not found under {} ({e}); run scripts/fetch_mnist.sh or set WBR_DATA_DIR",
                dir.display()
            )
        })
    };
    Ok((
        load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

/// Isotropic Gaussian blobs: class `c` has mean `separation * e_c` and unit variance.
pub fn gaussian_blobs(
    num_classes: u32,
    dim: usize,
    per_class: usize,
    separation: f64,
    rng: &mut SeededRng,
) -> LabeledDataset {
    assert!(dim >= num_classes as usize);
    let mut data = Vec::with_capacity(num_classes as usize * per_class * dim);
    let mut labels = Vec::new();
    for c in 0..num_classes {
        for _ in 0..per_class {
            for j in 0..dim {
                let mean = if j == c as usize { separation } else { 0.0 };
                data.push(mean + rng.normal());
            }
            labels.push(c);
        }
    }
    let features = DenseMatrix::from_vec(labels.len(), dim, data).unwrap();
    LabeledDataset::new(features, labels, num_classes).unwrap()
}

pub fn uniform_batch(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.next_f64()).collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

pub fn loss_of(model: &MlpModel, x: &DenseMatrix, labels: &[u32], mask: &ClassSet) -> f64 {
    let (logits, _) = model.forward(x, mask).unwrap();
    softmax_ce(&logits, labels, mask).unwrap().loss
}

/// Worst relative error of the analytic gradient against central differences,
/// over every bias, every final-layer weight and `samples_per_layer` random
/// entries of each other weight matrix.
pub fn max_fd_error(
    model: &MlpModel,
    x: &DenseMatrix,
    labels: &[u32],
    mask: &ClassSet,
    eps: f64,
    samples_per_layer: usize,
    rng: &mut SeededRng,
) -> f64 {
    let (logits, cache) = model.forward(x, mask).unwrap();
    let ce = softmax_ce(&logits, labels, mask).unwrap();
    let grads = model.backward(&cache, &ce.d_logits).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().map(<[f64]>::to_vec).collect();

    let num_slices = analytic.len();
    let mut worst: f64 = 0.0;
    for (s, a) in analytic.iter().enumerate() {
        let is_bias = s % 2 == 1;
        let is_last_weight = s == num_slices - 2;
        let idx: Vec<usize> = if is_bias || is_last_weight || a.len() <= samples_per_layer {
            (0..a.len()).collect()
        } else {
            (0..samples_per_layer)
                .map(|_| rng.below(a.len() as u64) as usize)
                .collect()
        };
        for i in idx {
            let mut plus = model.clone();
            plus.parameters_mut().nth(s).unwrap()[i] += eps;
            let mut minus = model.clone();
            minus.parameters_mut().nth(s).unwrap()[i] -= eps;
            let fd =
                (loss_of(&plus, x, labels, mask) - loss_of(&minus, x, labels, mask)) / (2.0 * eps);
            let scale = a[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((a[i] - fd).abs() / scale);
        }
    }
    worst
}
