use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A client's mini-batch before it crosses the split boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sample_ids: Vec<usize>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Set by label/input attacks; copied into the records' ground truth.
    pub poisoned: Vec<bool>,
}

impl Batch {
    pub fn new(sample_ids: Vec<usize>, features: Array2<f64>, labels: Vec<usize>) -> Self {
        let n = labels.len();
        Self {
            sample_ids,
            features,
            labels,
            poisoned: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One intermediate representation shipped from a client to the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmashedRecord {
    pub sample_id: usize,
    pub client_id: usize,
    pub features: Vec<f64>,
    pub label: usize,
    /// Ground truth for evaluation. Defense logic never reads it.
    pub poison_truth: bool,
}

/// Stacks record features into a `K × d_z` matrix.
pub fn feature_matrix(records: &[SmashedRecord]) -> Array2<f64> {
    let dim = records.first().map(|r| r.features.len()).unwrap_or(0);
    let mut m = Array2::zeros((records.len(), dim));
    for (mut row, r) in m.rows_mut().into_iter().zip(records) {
        for (dst, src) in row.iter_mut().zip(&r.features) {
            *dst = *src;
        }
    }
    m
}
