//! Datasets, non-iid partitioning, per-client splits and seeded batching.

mod io;
mod partition;
mod split;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

pub use io::{load_csv, load_idx, write_csv};
pub use partition::{dirichlet_partition, sample_dirichlet, PartitionPlan};
pub use split::{batch_indices, batches, train_test_split, ClientSplit, TEST_FRACTION};
pub use synth::synth_blobs;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("{path}: malformed file at byte offset {offset}: {msg}")]
    Malformed { path: PathBuf, offset: u64, msg: String },
    #[error("{path}: row {row}, column '{column}': {msg}")]
    BadCell { path: PathBuf, row: u64, column: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Labelled samples with inputs shaped `(K, H, W, C)` and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if inputs.rank() != 4 {
            return Err(DataError::Argument(format!(
                "inputs must be (samples, height, width, channels), got {:?}",
                inputs.shape()
            )));
        }
        if inputs.batch() != labels.len() {
            return Err(DataError::Argument(format!("{} inputs but {} labels", inputs.batch(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Argument(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample shape `(H, W, C)`.
    pub fn sample_shape(&self) -> &[usize] {
        self.inputs.sample_shape()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order. Panics on an empty index list.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Inputs and labels for one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}
