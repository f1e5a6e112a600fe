//! Local attribute subspace and orthogonal projection of the query.

use serde::{Deserialize, Serialize};

use crate::error::{BendError, Result};
use crate::vector::{self, check_dim, Embedding, NORM_EPS};

/// Columns whose residual falls below this fraction of their own norm after
/// projection onto the accepted basis are dropped as linearly dependent.
pub const RANK_TOL: f64 = 1e-8;

/// Residual norm below which the query is considered to lie in the subspace.
pub const COLLAPSE_TOL: f64 = 1e-8;

/// How generic attribute embeddings enter the attribute matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenericColumns {
    /// `generic[i] - generic[0]` for every `i >= 1`.
    #[default]
    Diff,
    /// Each generic embedding as its own column.
    Raw,
    /// Generic embeddings are ignored.
    None,
}

impl std::str::FromStr for GenericColumns {
    type Err = BendError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff" => Ok(GenericColumns::Diff),
            "raw" => Ok(GenericColumns::Raw),
            "none" => Ok(GenericColumns::None),
            other => Err(BendError::Config(format!(
                "generic columns must be diff, raw or none, got {other:?}"
            ))),
        }
    }
}

/// Columns of the local attribute matrix and an orthonormal basis of their span.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMatrix {
    columns: Vec<Embedding>,
    retained_basis: Vec<Embedding>,
    retained_columns: Vec<usize>,
    dropped_count: usize,
}

impl AttributeMatrix {
    /// Orthonormalizes `columns` in order with sequential Gram-Schmidt,
    /// dropping any column that is (numerically) in the span of the ones
    /// accepted before it.
    pub fn from_columns(columns: Vec<Embedding>) -> Result<Self> {
        let dim = columns.first().map(Embedding::dim).unwrap_or(0);
        for col in &columns {
            check_dim(dim, col.dim())?;
        }
        let (basis, retained) = gram_schmidt(&columns, RANK_TOL, NORM_EPS);
        if basis.is_empty() {
            return Err(BendError::DegenerateSubspace {
                columns: columns.len(),
            });
        }
        let dropped_count = columns.len() - basis.len();
        Ok(AttributeMatrix {
            columns,
            retained_basis: basis,
            retained_columns: retained,
            dropped_count,
        })
    }

    pub fn columns(&self) -> &[Embedding] {
        &self.columns
    }

    pub fn retained_basis(&self) -> &[Embedding] {
        &self.retained_basis
    }

    /// Indices into [`columns`](Self::columns) that contributed a basis vector.
    pub fn retained_columns(&self) -> &[usize] {
        &self.retained_columns
    }

    pub fn rank(&self) -> usize {
        self.retained_basis.len()
    }

    pub fn dropped_count(&self) -> usize {
        self.dropped_count
    }

    pub fn dim(&self) -> usize {
        self.retained_basis[0].dim()
    }
}

/// Sequential Gram-Schmidt with column dropping. A column is skipped when its
/// norm is at most `abs_floor` or its residual against the accepted basis is
/// below `rel_tol` times its norm. Returns the basis and the retained column
/// indices.
pub(crate) fn gram_schmidt<C: AsRef<[f64]>>(
    columns: &[C],
    rel_tol: f64,
    abs_floor: f64,
) -> (Vec<Embedding>, Vec<usize>) {
    let mut basis: Vec<Embedding> = Vec::new();
    let mut retained = Vec::new();
    for (i, col) in columns.iter().enumerate() {
        let col = col.as_ref();
        let original = vector::norm(col);
        if original <= abs_floor {
            continue;
        }
        let mut r = col.to_vec();
        // Two passes keep the basis orthonormal to working precision.
        vector::project_out_in_place(&mut r, &basis);
        vector::project_out_in_place(&mut r, &basis);
        let rn = vector::norm(&r);
        if rn < rel_tol * original || rn <= abs_floor {
            continue;
        }
        vector::scale_in_place(&mut r, 1.0 / rn);
        basis.push(Embedding::from_vec_unchecked(r));
        retained.push(i);
    }
    (basis, retained)
}

fn difference(a: &Embedding, b: &Embedding) -> Embedding {
    Embedding::from_vec_unchecked(
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x - y)
            .collect(),
    )
}

/// Builds the attribute matrix for one query.
///
/// Column order: `augmented[i] - query` for each value, then the generic
/// directions as selected by `generic_mode`. `augmented` and `generic` are
/// in attribute-value order; `generic` may be empty.
pub fn build_attribute_matrix(
    query: &Embedding,
    augmented: &[Embedding],
    generic: &[Embedding],
    generic_mode: GenericColumns,
) -> Result<AttributeMatrix> {
    let dim = query.dim();
    if augmented.is_empty() {
        return Err(BendError::EmptySet("no augmented embeddings"));
    }
    if !generic.is_empty() && generic.len() != augmented.len() && generic_mode != GenericColumns::None {
        return Err(BendError::Config(format!(
            "augmented and generic embeddings cover different value sets ({} vs {})",
            augmented.len(),
            generic.len()
        )));
    }
    for e in augmented.iter().chain(generic) {
        check_dim(dim, e.dim())?;
    }
    let mut columns: Vec<Embedding> = augmented.iter().map(|a| difference(a, query)).collect();
    match generic_mode {
        GenericColumns::Diff => {
            if let Some((first, rest)) = generic.split_first() {
                columns.extend(rest.iter().map(|g| difference(g, first)));
            }
        }
        GenericColumns::Raw => columns.extend(generic.iter().cloned()),
        GenericColumns::None => {}
    }
    AttributeMatrix::from_columns(columns)
}

/// Projects `query` onto the orthogonal complement of the attribute subspace
/// and renormalizes.
pub fn orthogonalize(query: &Embedding, matrix: &AttributeMatrix) -> Result<Embedding> {
    check_dim(matrix.dim(), query.dim())?;
    let residual = vector::project_out(query, matrix.retained_basis());
    let rn = residual.norm();
    if rn < COLLAPSE_TOL * query.norm().max(NORM_EPS) {
        return Err(BendError::QueryInsideSubspace { residual: rn });
    }
    vector::normalize(&residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_unit, seeded_rng as rng};

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    /// Numerical rank via Householder QR with column pivoting, independent of
    /// the Gram-Schmidt path under test.
    fn householder_rank(cols: &[Vec<f64>], tol: f64) -> usize {
        let m = cols[0].len();
        let mut a: Vec<Vec<f64>> = cols.to_vec();
        let scale = a
            .iter()
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let mut rank = 0;
        for k in 0..a.len().min(m) {
            // pivot on the largest remaining column norm below row k
            let (p, best) = (k..a.len())
                .map(|j| (j, a[j][k..].iter().map(|x| x * x).sum::<f64>().sqrt()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best <= tol * scale {
                break;
            }
            a.swap(k, p);
            let alpha = -a[k][k].signum() * best;
            let mut v: Vec<f64> = a[k][k..].to_vec();
            v[0] -= alpha;
            let vn2: f64 = v.iter().map(|x| x * x).sum();
            for col in a.iter_mut().skip(k) {
                let proj: f64 = v.iter().zip(&col[k..]).map(|(x, y)| x * y).sum::<f64>() * 2.0 / vn2;
                for (ci, vi) in col[k..].iter_mut().zip(&v) {
                    *ci -= proj * vi;
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn thirty_degree_example() {
        let t = 30f64.to_radians();
        let q = e(&[0.0, 0.0, 1.0]);
        let aug = [e(&[t.sin(), 0.0, t.cos()]), e(&[-t.sin(), 0.0, t.cos()])];
        let a = build_attribute_matrix(&q, &aug, &[], GenericColumns::Diff).unwrap();
        let c0 = a.columns()[0].as_slice();
        let c1 = a.columns()[1].as_slice();
        let dz = t.cos() - 1.0; // -0.1339746
        assert!((c0[0] - 0.5).abs() < 1e-15 && (c0[2] - dz).abs() < 1e-15);
        assert!((c1[0] + 0.5).abs() < 1e-15 && (c1[2] - dz).abs() < 1e-15);
        assert!((dz + 0.133_974_596_215_561_35).abs() < 1e-15);
        assert_eq!(a.rank(), 2);
        assert_eq!(a.dropped_count(), 0);
        let cols: Vec<Vec<f64>> = a.columns().iter().map(|c| c.as_slice().to_vec()).collect();
        assert_eq!(householder_rank(&cols, RANK_TOL), 2);
    }

    #[test]
    fn all_equal_is_degenerate() {
        let q = e(&[0.0, 0.6, 0.8]);
        let r = build_attribute_matrix(&q, &[q.clone(), q.clone()], &[], GenericColumns::Diff);
        assert!(matches!(r, Err(BendError::DegenerateSubspace { columns: 2 })));
    }

    #[test]
    fn duplicated_column_is_dropped() {
        let base = vec![e(&[1.0, 0.0, 0.0, 0.0]), e(&[1.0, 1.0, 0.0, 0.0])];
        let a = AttributeMatrix::from_columns(base.clone()).unwrap();
        let mut dup = base.clone();
        dup.push(base[1].clone());
        let b = AttributeMatrix::from_columns(dup).unwrap();
        assert_eq!(a.retained_basis(), b.retained_basis());
        assert_eq!(b.dropped_count(), a.dropped_count() + 1);
    }

    #[test]
    fn orthogonalize_examples() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let basis = AttributeMatrix::from_columns(vec![e(&[0.0, 1.0, 0.0])]).unwrap();
        let z = orthogonalize(&e(&[h, h, 0.0]), &basis).unwrap();
        assert!((z.as_slice()[0] - 1.0).abs() < 1e-15 && z.as_slice()[1].abs() < 1e-15);
        let q = e(&[0.6, 0.0, 0.8]);
        assert_eq!(orthogonalize(&q, &basis).unwrap(), q);
        assert!(matches!(
            orthogonalize(&e(&[0.0, 1.0, 0.0]), &basis),
            Err(BendError::QueryInsideSubspace { .. })
        ));
    }

    #[test]
    fn generic_modes() {
        let q = e(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        let aug = [e(&[1.0, 0.1, 0.0, 0.0, 0.0]), e(&[1.0, -0.1, 0.0, 0.0, 0.0])];
        let gen = [e(&[0.0, 0.0, 1.0, 0.0, 0.0]), e(&[0.0, 0.0, 0.0, 1.0, 0.0])];
        let diff = build_attribute_matrix(&q, &aug, &gen, GenericColumns::Diff).unwrap();
        assert_eq!(diff.columns().len(), 3);
        assert_eq!(diff.rank(), 2);
        assert_eq!(diff.dropped_count(), 1);
        let raw = build_attribute_matrix(&q, &aug, &gen, GenericColumns::Raw).unwrap();
        assert_eq!(raw.columns().len(), 4);
        assert_eq!(raw.rank(), 3);
        let none = build_attribute_matrix(&q, &aug, &gen, GenericColumns::None).unwrap();
        assert_eq!(none.rank(), 1);
    }

    #[test]
    fn basis_is_orthonormal_for_random_columns() {
        let mut r = rng(11);
        for _ in 0..50 {
            let cols: Vec<Embedding> = (0..6).map(|_| random_unit(&mut r, 16)).collect();
            let a = AttributeMatrix::from_columns(cols).unwrap();
            let b = a.retained_basis();
            for i in 0..b.len() {
                for j in 0..b.len() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((b[i].dot(&b[j]) - expect).abs() < 1e-8);
                }
            }
        }
    }
}
