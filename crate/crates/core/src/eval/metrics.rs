//! Pessimistic ranks, median rank and Recall@K.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::EvalError;

/// Rank of `truth` in `scores`: one plus the number of other candidates
/// scoring at least as high. Ties count against the truth.
pub fn rank_of(scores: ArrayView1<f64>, truth: usize) -> usize {
    let t = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != truth && s >= t)
        .count()
}

/// Rank of the gallery entry `truth_id` for a query scored by dot product.
pub fn rank_gallery(query: &[f64], gallery: &[(String, Vec<f64>)], truth_id: &str) -> Result<usize, EvalError> {
    let truth = gallery
        .iter()
        .position(|(id, _)| id == truth_id)
        .ok_or_else(|| EvalError::TruthAbsent(truth_id.to_string()))?;
    let scores: Vec<f64> = gallery
        .iter()
        .map(|(_, e)| e.iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    Ok(rank_of(ArrayView1::from(&scores), truth))
}

/// Ranks of the diagonal entries, one per row (image-to-recipe when rows
/// are image queries).
pub fn row_ranks(scores: &Array2<f64>) -> Vec<usize> {
    (0..scores.nrows()).map(|i| rank_of(scores.row(i), i)).collect()
}

/// Ranks of the diagonal entries, one per column (recipe-to-image).
pub fn column_ranks(scores: &Array2<f64>) -> Vec<usize> {
    (0..scores.ncols()).map(|j| rank_of(scores.column(j), j)).collect()
}

/// Median; for an even count, the midpoint of the two central values.
pub fn median_rank(ranks: &[usize]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

/// Percentage of ranks at most `k`.
pub fn recall_at(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub med_r: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RankMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self, EvalError> {
        Ok(Self {
            med_r: median_rank(ranks)?,
            r1: recall_at(ranks, 1)?,
            r5: recall_at(ranks, 5)?,
            r10: recall_at(ranks, 10)?,
        })
    }

    /// Arithmetic mean of each field.
    pub fn mean(items: &[RankMetrics]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&RankMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self {
            med_r: sum(|m| m.med_r),
            r1: sum(|m| m.r1),
            r5: sum(|m| m.r5),
            r10: sum(|m| m.r10),
        })
    }
}
