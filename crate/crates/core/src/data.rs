//! Dataset ingestion: MNIST IDX files and the `WBRF` feature-file format.
//!
//! `WBRF` layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic  "WBRF"
//! 4       4     version (u32, = 1)
//! 8       8     count (u64)
//! 16      4     dim (u32)
//! 20      4     num_classes (u32)
//! 24      4*count*dim   features, f32, row-major
//! ...     4*count       labels, u32
//! ```
//!
//! Features are stored as `f32` and widened to `f64` on load.

use std::fs;
use std::path::Path;

use crate::linalg::DenseMatrix;
use crate::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"WBRF";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 24;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: u32 = 10;

/// Feature rows with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: DenseMatrix,
    labels: Vec<u32>,
    num_classes: u32,
}

impl LabeledDataset {
    pub fn new(features: DenseMatrix, labels: Vec<u32>, num_classes: u32) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} not below num_classes {num_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Reads an MNIST image/label IDX pair. Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_mnist_idx(&images, &labels)
}

pub fn parse_mnist_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n_images = be_u32(images, 4, "image header")? as usize;
    let rows = be_u32(images, 8, "image header")? as usize;
    let cols = be_u32(images, 12, "image header")? as usize;

    let magic = be_u32(labels, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_labels = be_u32(labels, 4, "label header")? as usize;
    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }

    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() < n_images * dim {
        return Err(Error::Length {
            expected: (16 + n_images * dim) as u64,
            found: images.len() as u64,
        });
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(Error::Length {
            expected: (8 + n_labels) as u64,
            found: labels.len() as u64,
        });
    }

    let data = pixels[..n_images * dim]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let features = DenseMatrix::from_vec(n_images, dim, data)?;
    let labels = label_bytes[..n_labels]
        .iter()
        .map(|&l| u32::from(l))
        .collect();
    LabeledDataset::new(features, labels, MNIST_CLASSES)
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what} truncated at byte {offset}")))
}

/// Decoded `WBRF` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub count: u64,
    pub dim: u32,
    pub num_classes: u32,
}

impl FeatureFileHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::Format(format!(
                "feature file is {} bytes, shorter than the {FEATURE_HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"WBRF\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let le_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = le_u32(4);
        if version != FEATURE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FEATURE_VERSION,
            });
        }
        Ok(Self {
            version,
            count: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            dim: le_u32(16),
            num_classes: le_u32(20),
        })
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.num_classes.to_le_bytes());
    }

    fn body_len(&self) -> Option<u64> {
        let cells = self.count.checked_mul(u64::from(self.dim))?;
        cells.checked_add(self.count)?.checked_mul(4)
    }
}

pub fn encode_features(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    let dim = u32::try_from(dataset.dim())
        .map_err(|_| Error::Consistency(format!("dim {} exceeds u32", dataset.dim())))?;
    let header = FeatureFileHeader {
        version: FEATURE_VERSION,
        count: dataset.len() as u64,
        dim,
        num_classes: dataset.num_classes(),
    };
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * dataset.len() * (dataset.dim() + 1));
    header.write_to(&mut out);
    for &x in dataset.features().as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for &l in dataset.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<LabeledDataset> {
    let header = FeatureFileHeader::parse(bytes)?;
    let body = header
        .body_len()
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    let expected = FEATURE_HEADER_LEN as u64 + body;
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len() as u64,
        });
    }
    let count = header.count as usize;
    let dim = header.dim as usize;
    let payload_end = FEATURE_HEADER_LEN + 4 * count * dim;
    let data = bytes[FEATURE_HEADER_LEN..payload_end]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let labels = bytes[payload_end..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features = DenseMatrix::from_vec(count, dim, data)?;
    LabeledDataset::new(features, labels, header.num_classes)
}

pub fn load_feature_file(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

pub fn write_feature_file(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let bytes = encode_features(dataset)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
