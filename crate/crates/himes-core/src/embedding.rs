//! Embedding vectors and cosine similarity.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// How far an L2 norm may stray from 1 while still counting as unit-norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A fixed-dimension real vector as produced by an embedding model. The
/// `unit_norm` flag records that the vector was validated (or constructed) to
/// have L2 norm 1, which lets cosine similarity reduce to a dot product.
///
/// On the wire (record logs, caches) an embedding is a plain array of
/// numbers; the flag is recomputed from the norm when deserializing.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    unit_norm: bool,
}

impl Serialize for EmbeddingVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.values.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        let unit_norm = (l2(&values) - 1.0).abs() <= UNIT_NORM_TOLERANCE;
        Ok(EmbeddingVector { values, unit_norm })
    }
}

impl EmbeddingVector {
    /// Wraps raw values without any norm claim.
    pub fn raw(values: Vec<f64>) -> Self {
        EmbeddingVector {
            values,
            unit_norm: false,
        }
    }

    /// Wraps values that are already unit-norm; errors when the norm is off
    /// by more than [`UNIT_NORM_TOLERANCE`].
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::NotUnitNorm { norm });
        }
        Ok(EmbeddingVector {
            values,
            unit_norm: true,
        })
    }

    /// Scales values to unit norm. A zero vector is an error: it signals a
    /// broken embedder rather than a degenerate-but-valid input.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(EmbeddingVector {
            values: values.into_iter().map(|v| v / norm).collect(),
            unit_norm: true,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm
    }

    pub fn l2_norm(&self) -> f64 {
        l2(&self.values)
    }
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity. When both vectors carry the unit-norm flag this is the
/// plain dot product; otherwise norms are computed and a zero vector is
/// rejected. Dimensions must match. Results are clamped to [-1, 1] so
/// rounding on near-identical vectors cannot escape the documented range.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dimension() != b.dimension() {
        return Err(Error::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    if a.unit_norm && b.unit_norm {
        return Ok(dot(&a.values, &b.values).clamp(-1.0, 1.0));
    }
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0))
}
