use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::embedding::EmbeddingVector;

/// Shape of a projector: `prefix_len` slots of `decoder_dim` values each,
/// computed from an `embedding_dim` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorShape {
    pub embedding_dim: usize,
    pub prefix_len: usize,
    pub decoder_dim: usize,
}

impl ProjectorShape {
    pub fn rows(&self) -> usize {
        self.prefix_len * self.decoder_dim
    }
}

/// Learnable affine map `W x + b` from the shared embedding space to a
/// decoder prefix. `weight` is `[prefix_len * decoder_dim, embedding_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub(crate) weight: Array2<f32>,
    pub(crate) bias: Array1<f32>,
    prefix_len: usize,
}

impl Projector {
    pub fn new(weight: Array2<f32>, bias: Array1<f32>, prefix_len: usize) -> Result<Self, TrainError> {
        let rows = weight.nrows();
        if prefix_len == 0 || rows == 0 || !rows.is_multiple_of(prefix_len) || bias.len() != rows || weight.ncols() == 0 {
            return Err(TrainError::InvalidConfig(format!(
                "projector shapes inconsistent: weight {:?}, bias {}, prefix_len {prefix_len}",
                weight.dim(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(TrainError::InvalidConfig("projector has non-finite parameters".into()));
        }
        Ok(Self {
            weight,
            bias,
            prefix_len,
        })
    }

    pub fn zeros(shape: ProjectorShape) -> Self {
        Self {
            weight: Array2::zeros((shape.rows(), shape.embedding_dim)),
            bias: Array1::zeros(shape.rows()),
            prefix_len: shape.prefix_len,
        }
    }

    /// Uniform in `±1/sqrt(embedding_dim)`, the usual linear-layer init.
    pub fn random(shape: ProjectorShape, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (shape.embedding_dim as f32).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weight = Array2::from_shape_simple_fn((shape.rows(), shape.embedding_dim), &mut draw);
        let bias = Array1::from_shape_simple_fn(shape.rows(), &mut draw);
        Self {
            weight,
            bias,
            prefix_len: shape.prefix_len,
        }
    }

    pub fn shape(&self) -> ProjectorShape {
        ProjectorShape {
            embedding_dim: self.weight.ncols(),
            prefix_len: self.prefix_len,
            decoder_dim: self.weight.nrows() / self.prefix_len,
        }
    }

    pub fn weight(&self) -> &Array2<f32> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f32> {
        &self.bias
    }
}

/// `W x + b` reshaped to `[prefix_len, decoder_dim]`, accumulated in `f64`.
pub fn project(embedding: &EmbeddingVector, projector: &Projector) -> Result<Array2<f64>, TrainError> {
    project_slice(embedding.as_slice(), projector)
}

pub(crate) fn project_slice(x: &[f32], projector: &Projector) -> Result<Array2<f64>, TrainError> {
    let shape = projector.shape();
    if x.len() != shape.embedding_dim {
        return Err(TrainError::DimensionMismatch {
            expected: shape.embedding_dim,
            got: x.len(),
        });
    }
    let flat: Vec<f64> = projector
        .weight
        .rows()
        .into_iter()
        .zip(projector.bias.iter())
        .map(|(row, &b)| {
            row.iter()
                .zip(x)
                .fold(f64::from(b), |acc, (&w, &v)| acc + f64::from(w) * f64::from(v))
        })
        .collect();
    Ok(Array2::from_shape_vec((shape.prefix_len, shape.decoder_dim), flat).expect("rows divide evenly"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> ProjectorShape {
        ProjectorShape {
            embedding_dim: 5,
            prefix_len: 3,
            decoder_dim: 4,
        }
    }

    fn vector(values: Vec<f32>) -> EmbeddingVector {
        EmbeddingVector::new(values).unwrap()
    }

    #[test]
    fn zero_projector_gives_zero_prefix() {
        let p = Projector::zeros(shape());
        let out = project(&vector(vec![1.0, -2.0, 3.0, 0.5, 9.0]), &p).unwrap();
        assert_eq!(out.dim(), (3, 4));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projector_copies_input() {
        let p = Projector::new(Array2::eye(5), Array1::zeros(5), 1).unwrap();
        let x = vec![0.25, -1.5, 3.0, 0.0, 7.0];
        let out = project(&vector(x.clone()), &p).unwrap();
        let expected: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        assert_eq!(out.into_raw_vec_and_offset().0, expected);
    }

    #[test]
    fn basis_vector_selects_column_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Projector::random(shape(), &mut rng);
        for i in 0..5 {
            let mut e = vec![0.0f32; 5];
            e[i] = 1.0;
            let out = project(&vector(e), &p).unwrap();
            let flat = out.into_raw_vec_and_offset().0;
            for (row, &got) in flat.iter().enumerate() {
                let expected = f64::from(p.weight[[row, i]]) + f64::from(p.bias[row]);
                assert!((got - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = Projector::zeros(shape());
        assert!(matches!(
            project(&vector(vec![1.0; 4]), &p),
            Err(TrainError::DimensionMismatch { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(Projector::new(Array2::zeros((6, 2)), Array1::zeros(6), 4).is_err());
        assert!(Projector::new(Array2::zeros((6, 2)), Array1::zeros(5), 3).is_err());
        assert!(Projector::new(Array2::from_elem((2, 2), f32::NAN), Array1::zeros(2), 1).is_err());
    }
}
