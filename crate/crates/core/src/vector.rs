//! Dense vector arithmetic shared by every stage of the pipeline.
//!
//! Storage on disk is 32-bit, but everything here runs in `f64` so the
//! chained projection and equalization steps do not accumulate drift.

use serde::{Deserialize, Serialize};

use crate::error::{BendError, Result};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Tolerance used by [`Embedding::is_normalized`].
pub const UNIT_TOL: f64 = 1e-9;

/// A dense embedding in `f64`. Not necessarily unit norm; see [`normalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Wraps `values`, rejecting `d < 2` and non-finite coordinates.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(BendError::InvalidEmbedding(format!(
                "dimension must be at least 2, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(BendError::InvalidEmbedding(format!(
                "coordinate {i} is not finite"
            )));
        }
        Ok(Embedding { values })
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&x| f64::from(x)).collect())
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|x| x.is_finite()));
        Embedding { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding {
            values: vec![0.0; dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    #[inline]
    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOL
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// A cosine similarity in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Similarity(f64);

impl Similarity {
    /// Clamps `value` into `[-1, 1]`.
    pub fn new(value: f64) -> Self {
        Similarity(value.clamp(-1.0, 1.0))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// Cosine distance, `1 - similarity`, in `[0, 2]`.
    #[inline]
    pub fn distance(self) -> f64 {
        1.0 - self.0
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(BendError::DimensionMismatch { expected, actual })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn scale_in_place(v: &mut [f64], factor: f64) {
    v.iter_mut().for_each(|x| *x *= factor);
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &Embedding) -> Result<Embedding> {
    normalize_vec(v.values.clone())
}

pub(crate) fn normalize_vec(mut values: Vec<f64>) -> Result<Embedding> {
    let n = norm(&values);
    if n <= NORM_EPS || !n.is_finite() {
        return Err(BendError::ZeroVector {
            norm: n,
            eps: NORM_EPS,
        });
    }
    scale_in_place(&mut values, 1.0 / n);
    Ok(Embedding::from_vec_unchecked(values))
}

/// Cosine similarity between two non-zero vectors of equal dimension.
pub fn cosine_similarity(u: &Embedding, v: &Embedding) -> Result<Similarity> {
    check_dim(u.dim(), v.dim())?;
    let (nu, nv) = (u.norm(), v.norm());
    for n in [nu, nv] {
        if n <= NORM_EPS {
            return Err(BendError::ZeroVector {
                norm: n,
                eps: NORM_EPS,
            });
        }
    }
    Ok(Similarity::new(u.dot(v) / (nu * nv)))
}

/// Returns the cosine similarity score; read `.distance()` for `1 - cos`.
pub fn cosine_distance(u: &Embedding, v: &Embedding) -> Result<Similarity> {
    cosine_similarity(u, v)
}

/// Componentwise arithmetic mean. The result is not renormalized.
pub fn mean_embedding<'a, I>(set: I) -> Result<Embedding>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = set.into_iter();
    let first = iter.next().ok_or(BendError::EmptySet("mean of empty set"))?;
    let mut acc = first.to_vec();
    let mut count = 1usize;
    for v in iter {
        check_dim(acc.len(), v.len())?;
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        count += 1;
    }
    scale_in_place(&mut acc, 1.0 / count as f64);
    Ok(Embedding::from_vec_unchecked(acc))
}

/// Removes the components of `v` along each vector of an orthonormal `basis`.
///
/// Uses the modified Gram-Schmidt ordering (each coefficient is taken against
/// the running residual), which matches `v - sum (v.b) b` for an exactly
/// orthonormal basis and is more stable when it is only nearly so.
pub fn project_out<B: AsRef<[f64]>>(v: &Embedding, basis: &[B]) -> Embedding {
    let mut w = v.values.clone();
    project_out_in_place(&mut w, basis);
    Embedding::from_vec_unchecked(w)
}

pub(crate) fn project_out_in_place<B: AsRef<[f64]>>(w: &mut [f64], basis: &[B]) {
    for b in basis {
        let b = b.as_ref();
        let c = dot(w, b);
        axpy(-c, b, w);
    }
}
