//! Datasets, IDX files, checkpoints and manifest files.

mod bytes;
mod checkpoint;
mod idx;
mod manifest;

pub use checkpoint::{
    checkpoint_path, decode_checkpoint, encode_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use idx::{load_mnist, load_mnist_dir, read_idx, write_idx, IdxArray, MnistSplits, IMAGE_MAGIC, LABEL_MAGIC};
pub use manifest::{parse_manifest, write_manifest, Manifest, LAYER_NAMES_FILE, OPS_NAMES_FILE};

pub(crate) use bytes::{ByteReader, ByteWriter};

use crate::error::{BnnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Labelled examples; `images` is `[N, ..]` with one example per leading index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub split: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, split: &str) -> Result<Self> {
        if images.rank() == 0 || images.shape()[0] != labels.len() {
            return Err(BnnError::Data(format!(
                "{} images but {} labels",
                images.shape().first().copied().unwrap_or(0),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows `indices` reshaped to `[indices.len(), shape..]`.
    pub fn batch(&self, indices: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.example_shape().iter().product::<usize>() {
            return Err(BnnError::dim("dataset batch", self.example_shape(), shape));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(BnnError::Usage(format!("example index {bad} out of range {}", self.len())));
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(shape);
        self.images.gather_rows(indices).reshape(&full)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Self> {
        let images = self.batch(indices, self.example_shape())?;
        Dataset::new(images, self.labels_of(indices), split)
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head, &self.split)?, self.subset(&tail, &self.split)?))
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            split: self.split.clone(),
        }
    }
}
