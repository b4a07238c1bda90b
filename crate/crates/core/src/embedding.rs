//! Fixed-dimension vectors in the shared encoder space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VectorError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vector must have at least one component")]
    Empty,
    #[error("non-finite component at index {0}")]
    NonFinite(usize),
}

/// A finite, non-empty `f32` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Scale to unit length.
    pub fn normalized(&self) -> Result<Self, VectorError> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(VectorError::ZeroVector);
        }
        Self::new(
            self.values
                .iter()
                .map(|&v| (f64::from(v) / norm) as f32)
                .collect(),
        )
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = VectorError;

    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// Cosine similarity, accumulated in `f64` and clamped to `[-1, 1]`.
///
/// ```
/// use vioc_core::embedding::{cosine_similarity, EmbeddingVector};
///
/// let a = EmbeddingVector::new(vec![1.0, 1.0]).unwrap();
/// let b = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
/// let c = cosine_similarity(&a, &b).unwrap();
/// assert!((c - 0.5f64.sqrt()).abs() < 1e-6);
/// ```
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, VectorError> {
    if a.dim() != b.dim() {
        return Err(VectorError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(VectorError::ZeroVector);
    }
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - 2f64.sqrt() / 2.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(VectorError::DimensionMismatch { left: 1, right: 2 })
        );
        assert_eq!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(VectorError::ZeroVector)
        );
    }

    #[test]
    fn rejects_non_finite() {
        assert_eq!(
            EmbeddingVector::new(vec![1.0, f32::NAN]),
            Err(VectorError::NonFinite(1))
        );
        assert_eq!(EmbeddingVector::new(vec![]), Err(VectorError::Empty));
        assert!(serde_json::from_str::<EmbeddingVector>("[]").is_err());
    }

    fn nonzero_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (1usize..16).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f32..10.0, n),
                proptest::collection::vec(-10.0f32..10.0, n),
            )
        })
        .prop_filter("nonzero", |(a, b)| {
            a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3)
        })
    }

    proptest! {
        #[test]
        fn cosine_properties((a, b) in nonzero_pair(), scale in 0.01f32..100.0, exp in -8i32..8) {
            let (va, vb) = (v(&a), v(&b));
            let ab = cosine_similarity(&va, &vb).unwrap();
            let ba = cosine_similarity(&vb, &va).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.abs() <= 1.0 + 1e-9);
            let scaled = v(&a.iter().map(|x| x * scale).collect::<Vec<_>>());
            // Scaling in f32 perturbs the last bit of each component.
            prop_assert!((cosine_similarity(&scaled, &vb).unwrap() - ab).abs() < 1e-6);
            // Power-of-two scales are exact in f32, so the only error left is f64 rounding.
            let pow2 = v(&a.iter().map(|x| x * 2f32.powi(exp)).collect::<Vec<_>>());
            prop_assert!((cosine_similarity(&pow2, &vb).unwrap() - ab).abs() < 1e-9);
            prop_assert!((cosine_similarity(&va, &va).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
