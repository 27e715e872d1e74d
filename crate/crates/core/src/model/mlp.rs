use std::fs;
use std::path::Path;

use crate::linalg::{DenseMatrix, SeededRng};
use crate::scenario::ClassSet;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WBRM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fully connected network with ReLU hidden layers and linear logits.
///
/// Layer `l` maps `layer_dims[l]` inputs to `layer_dims[l + 1]` outputs and
/// stores its weight as an `out x in` matrix, so row `j` of the last layer is
/// the weight vector of class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
}

/// Per-layer activations recorded by [`MlpModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is the batch.
    inputs: Vec<DenseMatrix>,
    /// Pre-activations of hidden layers.
    hidden_pre: Vec<DenseMatrix>,
    mask: ClassSet,
}

impl ForwardCache {
    pub fn mask(&self) -> &ClassSet {
        &self.mask
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    /// Output of hidden layer `l` (post-ReLU).
    pub fn hidden_activation(&self, l: usize) -> &DenseMatrix {
        &self.inputs[l + 1]
    }

    pub fn hidden_pre_activation(&self, l: usize) -> &DenseMatrix {
        &self.hidden_pre[l]
    }
}

/// Gradient buffers shaped exactly like an [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_weights: Vec<DenseMatrix>,
    pub d_biases: Vec<Vec<f64>>,
}

impl MlpModel {
    /// Glorot-uniform weights from `rng`, zero biases.
    pub fn new(layer_dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        for w in &mut model.weights {
            let (fan_out, fan_in) = w.shape();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in w.as_mut_slice() {
                *x = rng.uniform(-limit, limit);
            }
        }
        Ok(model)
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims {layer_dims:?} need at least an input and an output, all nonzero"
            )));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| DenseMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a model from explicit `out x in` weights and biases.
    pub fn from_parts(weights: Vec<DenseMatrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config(
                "need one bias vector per weight matrix".into(),
            ));
        }
        let mut dims = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.cols() != *dims.last().unwrap() || b.len() != w.rows() {
                return Err(Error::Shape {
                    op: "from_parts",
                    left: w.shape(),
                    right: (b.len(), *dims.last().unwrap()),
                });
            }
            dims.push(w.rows());
        }
        Ok(Self {
            layer_dims: dims,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.as_slice().len())
            .sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// All parameter buffers in a fixed order: `W_0, b_0, W_1, b_1, ...`.
    pub fn parameters(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    fn check_mask(&self, mask: &ClassSet) -> Result<()> {
        match mask.max() {
            Some(c) if c as usize >= self.output_dim() => Err(Error::Protocol(format!(
                "class {c} outside the {} model outputs",
                self.output_dim()
            ))),
            _ => Ok(()),
        }
    }

    /// Logits for every output unit plus the activations needed by [`backward`](Self::backward).
    pub fn forward(
        &self,
        batch: &DenseMatrix,
        mask: &ClassSet,
    ) -> Result<(DenseMatrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward",
                left: batch.shape(),
                right: (self.output_dim(), self.input_dim()),
            });
        }
        self.check_mask(mask)?;
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut a = batch.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.matmul_nt(w)?;
            z.add_row_broadcast(b)?;
            inputs.push(a);
            if l == last {
                a = z;
            } else {
                let mut act = z.clone();
                act.as_mut_slice().iter_mut().for_each(|x| *x = x.max(0.0));
                hidden_pre.push(z);
                a = act;
            }
        }
        Ok((
            a,
            ForwardCache {
                inputs,
                hidden_pre,
                mask: mask.clone(),
            },
        ))
    }

    pub fn logits(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward(batch, &ClassSet::default()).map(|(z, _)| z)
    }

    /// Gradients of the loss whose logit gradient is `d_logits`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &DenseMatrix) -> Result<Gradients> {
        let stale = cache.inputs.len() != self.num_layers()
            || cache
                .inputs
                .iter()
                .zip(&self.layer_dims)
                .any(|(a, &d)| a.cols() != d || a.rows() != d_logits.rows());
        if stale || d_logits.cols() != self.output_dim() {
            return Err(Error::Shape {
                op: "backward",
                left: d_logits.shape(),
                right: (cache.batch_size(), self.output_dim()),
            });
        }
        let n = self.num_layers();
        let mut d_weights = vec![DenseMatrix::zeros(0, 0); n];
        let mut d_biases = vec![Vec::new(); n];
        let mut delta = d_logits.clone();
        for l in (0..n).rev() {
            d_weights[l] = delta.matmul_tn(&cache.inputs[l])?;
            d_biases[l] = delta.column_sums();
            if l > 0 {
                let mut prev = delta.matmul(&self.weights[l])?;
                for (d, &z) in prev
                    .as_mut_slice()
                    .iter_mut()
                    .zip(cache.hidden_pre[l - 1].as_slice())
                {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(Gradients {
            d_weights,
            d_biases,
        })
    }

    /// Argmax over the masked logits for each row. An empty mask means all outputs.
    pub fn predict(&self, batch: &DenseMatrix, mask: &ClassSet) -> Result<Vec<u32>> {
        let (logits, _) = self.forward(batch, mask)?;
        let candidates: Vec<u32> = if mask.is_empty() {
            (0..self.output_dim() as u32).collect()
        } else {
            mask.as_slice().to_vec()
        };
        Ok(logits
            .iter_rows()
            .map(|row| {
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if row[c as usize] > row[best as usize] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().all(|p| p.iter().all(|x| x.is_finite()))
    }

    /// Binary checkpoint: `"WBRM"`, version u32, layer count+1 u32, dims u32 each,
    /// then `W_l` (row-major f64) and `b_l` (f64) per layer, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(12 + 4 * self.layer_dims.len() + 8 * self.num_parameters());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in self.parameters() {
            for x in p {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let u32_at = |o: usize| -> Result<u32> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::Format("checkpoint header truncated".into()))
        };
        if bytes.len() < 12 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a WBRM checkpoint".into()));
        }
        let version = u32_at(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let n_dims = u32_at(8)? as usize;
        let dims = (0..n_dims)
            .map(|i| u32_at(12 + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self::zeros(&dims)?;
        let start = 12 + 4 * n_dims;
        let expected = (start + 8 * model.num_parameters()) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Length {
                expected,
                found: bytes.len() as u64,
            });
        }
        let mut values = bytes[start..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for p in model.parameters_mut() {
            for x in p {
                *x = values.next().unwrap();
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            d_weights: model
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            d_biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Same buffer order as [`MlpModel::parameters`].
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.d_weights
            .iter()
            .zip(&self.d_biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.d_weights
            .iter_mut()
            .zip(self.d_biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().flat_map(|s| s.iter().copied()).collect()
    }

    /// L2 norm over all parameters jointly.
    pub fn norm(&self) -> f64 {
        crate::linalg::l2_norm(&self.flatten())
    }

    pub fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Shapes as `(rows, cols)` per weight and length per bias.
    pub fn matches(&self, model: &MlpModel) -> bool {
        self.d_weights.len() == model.weights.len()
            && self
                .d_weights
                .iter()
                .zip(&model.weights)
                .all(|(g, w)| g.shape() == w.shape())
            && self
                .d_biases
                .iter()
                .zip(&model.biases)
                .all(|(g, b)| g.len() == b.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::softmax_ce;

    fn all(n: u32) -> ClassSet {
        ClassSet::new(0..n)
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = MlpModel::zeros(&[4, 3, 2]).unwrap();
        let batch = DenseMatrix::from_rows(&[vec![1.0, -2.0, 3.0, 0.5]]).unwrap();
        let (z, _) = m.forward(&batch, &all(2)).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn single_layer_equals_affine_map() {
        let w = DenseMatrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 3.0]]).unwrap();
        let b = vec![0.25, -1.0];
        let m = MlpModel::from_parts(vec![w.clone()], vec![b.clone()]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![0.0, 2.0, -1.0]]).unwrap();
        let (z, _) = m.forward(&x, &all(2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut expect = b[j];
                for k in 0..3 {
                    expect += x.get(i, k) * w.get(j, k);
                }
                assert_eq!(z.get(i, j), expect);
            }
        }
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let w0 = DenseMatrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let w1 = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let m = MlpModel::from_parts(vec![w0, w1], vec![vec![0.0; 2], vec![0.0]]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![2.0]]).unwrap();
        let (_, cache) = m.forward(&x, &all(1)).unwrap();
        assert_eq!(cache.hidden_pre_activation(0).as_slice(), &[2.0, -2.0]);
        assert_eq!(cache.hidden_activation(0).as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_width_and_bad_mask() {
        let m = MlpModel::zeros(&[3, 2]).unwrap();
        assert!(matches!(
            m.forward(&DenseMatrix::zeros(1, 4), &all(2)),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            m.forward(&DenseMatrix::zeros(1, 3), &ClassSet::new([5])),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = MlpModel::new(&[5, 4, 3], &mut SeededRng::new(1)).unwrap();
        let x = DenseMatrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4, 0.5]]).unwrap();
        let (_, cache) = m.forward(&x, &all(3)).unwrap();
        let g = m.backward(&cache, &DenseMatrix::zeros(1, 3)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(g.matches(&m));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = MlpModel::zeros(&[3, 2]).unwrap();
        let b = MlpModel::zeros(&[4, 2]).unwrap();
        let (_, cache) = a.forward(&DenseMatrix::zeros(2, 3), &all(2)).unwrap();
        assert!(matches!(
            b.backward(&cache, &DenseMatrix::zeros(2, 2)),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            a.backward(&cache, &DenseMatrix::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let m = MlpModel::new(&[784, 32, 10], &mut SeededRng::new(0)).unwrap();
        let limit0 = (6.0f64 / (784.0 + 32.0)).sqrt();
        assert!(m.weights()[0].as_slice().iter().all(|x| x.abs() <= limit0));
        assert!(m.biases().iter().flatten().all(|&b| b == 0.0));
        assert_eq!(m.num_parameters(), 784 * 32 + 32 + 32 * 10 + 10);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = MlpModel::new(&[6, 5, 4], &mut SeededRng::new(8)).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(MlpModel::from_bytes(&bytes).unwrap(), m);
        assert!(MlpModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(MlpModel::from_bytes(b"nope").is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let m = MlpModel::new(&[8, 6, 3], &mut SeededRng::new(4)).unwrap();
        let mut rng = SeededRng::new(5);
        let x = DenseMatrix::from_vec(3, 8, (0..24).map(|_| rng.normal()).collect()).unwrap();
        let a = m.forward(&x, &all(3)).unwrap().0;
        let b = m.forward(&x, &all(3)).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn predict_respects_mask() {
        let w = DenseMatrix::from_rows(&[vec![1.0], vec![5.0], vec![3.0]]).unwrap();
        let m = MlpModel::from_parts(vec![w], vec![vec![0.0; 3]]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(m.predict(&x, &ClassSet::default()).unwrap(), vec![1]);
        assert_eq!(m.predict(&x, &ClassSet::new([0, 2])).unwrap(), vec![2]);
        let (z, cache) = m.forward(&x, &ClassSet::new([0, 2])).unwrap();
        let ce = softmax_ce(&z, &[2], cache.mask()).unwrap();
        assert_eq!(ce.d_logits.get(0, 1), 0.0);
    }
}
