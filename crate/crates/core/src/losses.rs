//! Contrastive, view-similarity and classification objectives.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::generator::AugChoiceMatrix;
use crate::tensor::{TResult, Tensor};

/// Added to row norms before cosine normalization.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// NT-Xent temperature, > 0.
    pub tau: f64,
    /// Weight of the view-similarity term, ≥ 0.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda: 1.0,
        }
    }
}

/// NT-Xent over `2N` rows where rows `2k` and `2k + 1` (0-based) are a
/// positive pair. Every other row is a negative; only the anchor itself is
/// excluded from the denominator.
pub fn nt_xent(z: &Tensor, tau: f64) -> TResult<Tensor> {
    let [rows, _] = z.shape() else {
        return Err(TensorError::Rank {
            op: "nt_xent",
            expected: "a [2N, H] matrix",
            got: z.shape().to_vec(),
        });
    };
    let rows = *rows;
    if rows == 0 || rows % 2 != 0 {
        return Err(TensorError::Invalid(format!(
            "nt_xent needs an even, non-zero row count, got {rows}"
        )));
    }
    if !(tau > 0.0) {
        return Err(TensorError::Invalid(format!(
            "nt_xent temperature must be positive, got {tau}"
        )));
    }
    let zn = z.normalize_rows(COSINE_EPS)?;
    let sim = zn.matmul(&zn.transpose()?)?.scale(1.0 / tau);
    let mut mask = vec![0.0; rows * rows];
    (0..rows).for_each(|i| mask[i * rows + i] = f64::NEG_INFINITY);
    let logits = sim.add(&Tensor::new(mask, &[rows, rows])?)?;
    let partners: Vec<usize> = (0..rows).map(|i| i ^ 1).collect();
    Ok(logits
        .log_softmax_rows()?
        .pick_per_row(&partners)?
        .mean()
        .neg())
}

/// Interleaves two `[N, H]` embedding blocks into NT-Xent pair order.
pub fn pair_rows(a: &Tensor, b: &Tensor) -> TResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "pair_rows",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.shape()[0];
    let order: Vec<usize> = (0..n).flat_map(|k| [k, n + k]).collect();
    Tensor::concat_rows(&[a, b])?.gather_rows(&order)
}

/// Cosine similarity between the flattened probability matrices of two
/// generators.
pub fn similarity_loss(a1: &AugChoiceMatrix, a2: &AugChoiceMatrix) -> TResult<Tensor> {
    similarity_of(&a1.probs, &a2.probs)
}

/// Flattened cosine similarity of two equal-shape probability matrices.
pub fn similarity_of(p1: &Tensor, p2: &Tensor) -> TResult<Tensor> {
    if p1.shape() != p2.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_loss",
            lhs: p1.shape().to_vec(),
            rhs: p2.shape().to_vec(),
        });
    }
    let n = p1.numel();
    let f1 = p1.reshape(&[1, n])?;
    let f2 = p2.reshape(&[1, n])?;
    Ok(f1.cosine_rows(&f2, COSINE_EPS)?.sum())
}

/// Sum of batch-mean cross-entropies on the original graphs and both views.
pub fn classification_loss(
    logits_x: &Tensor,
    logits_x1: &Tensor,
    logits_x2: &Tensor,
    labels: &[usize],
) -> TResult<Tensor> {
    logits_x
        .cross_entropy(labels)?
        .add(&logits_x1.cross_entropy(labels)?)?
        .add(&logits_x2.cross_entropy(labels)?)
}
