//! Cross-view object alignment loss: mean Euclidean distance between query
//! and target object embeddings. Train-time only; owns no parameters.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("shape mismatch: query {0:?} vs target {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

/// Row-aligned query and target embeddings, `(B, d)` each.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    pub query_embeddings: Array2<f64>,
    pub target_embeddings: Array2<f64>,
}

impl AlignmentBatch {
    pub fn new(query: Array2<f64>, target: Array2<f64>) -> Result<Self, AlignError> {
        if query.dim() != target.dim() {
            return Err(AlignError::ShapeMismatch(query.dim(), target.dim()));
        }
        if query.nrows() == 0 {
            return Err(AlignError::EmptyBatch);
        }
        Ok(Self {
            query_embeddings: query,
            target_embeddings: target,
        })
    }

    pub fn len(&self) -> usize {
        self.query_embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-pair Euclidean distances.
    pub fn distances(&self) -> Vec<f64> {
        self.query_embeddings
            .rows()
            .into_iter()
            .zip(self.target_embeddings.rows())
            .map(|(q, t)| {
                q.iter()
                    .zip(t.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

pub fn xobj_loss(batch: &AlignmentBatch, kind: DistanceKind) -> f64 {
    let d = batch.distances();
    let sum: f64 = match kind {
        DistanceKind::Euclidean => d.iter().sum(),
        DistanceKind::SquaredEuclidean => d.iter().map(|x| x * x).sum(),
    };
    sum / d.len() as f64
}

/// Gradients `(d/d query, d/d target)`. Coincident pairs get the zero subgradient.
pub fn xobj_loss_backward(batch: &AlignmentBatch, kind: DistanceKind) -> (Array2<f64>, Array2<f64>) {
    let b = batch.len() as f64;
    let mut gq = &batch.query_embeddings - &batch.target_embeddings;
    for (mut row, dist) in gq.rows_mut().into_iter().zip(batch.distances()) {
        let scale = match kind {
            DistanceKind::Euclidean if dist > 0.0 => 1.0 / (dist * b),
            DistanceKind::Euclidean => 0.0,
            DistanceKind::SquaredEuclidean => 2.0 / b,
        };
        row *= scale;
    }
    let gt = -&gq;
    (gq, gt)
}
