use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm tolerance for vectors flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding contains non-finite value at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
}

/// A fixed-dimension real vector in the joint image/recipe space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVec {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingVec {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    /// L2-normalizes `values`. A zero vector stays zero and is not flagged.
    pub fn normalize(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let mut e = Self::new(values)?;
        let n = l2_norm(&e.values);
        if n > 0.0 {
            e.values.iter_mut().for_each(|x| *x /= n);
            e.normalized = true;
        }
        Ok(e)
    }

    /// Wraps values already of unit norm (within [`UNIT_NORM_TOL`]) unchanged.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let mut e = Self::new(values)?;
        e.normalized = (l2_norm(&e.values) - 1.0).abs() <= UNIT_NORM_TOL;
        Ok(e)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn dot(&self, other: &EmbeddingVec) -> Result<f64, EmbeddingError> {
        other.check_dim(self.dim())?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn cosine(&self, other: &EmbeddingVec) -> Result<f64, EmbeddingError> {
        let d = self.dot(other)?;
        Ok(d / (self.norm() * other.norm()))
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), EmbeddingError> {
        if self.dim() != expected {
            return Err(EmbeddingError::Dimension {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `acc += scale * x`
pub fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}
