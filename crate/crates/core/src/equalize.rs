//! Equalization: the unit vector closest to `z'` whose mean similarity to
//! every attribute group's relevant set is the same.
//!
//! The constraints `mu_k . z = mu_1 . z` are homogeneous and linear, so the
//! maximizer of `z . z'` on the sphere is the normalized projection of `z'`
//! onto the common null space of the differences `mu_k - mu_1`. For two
//! groups this is the Lagrange-multiplier closed form
//!
//! ```text
//! lambda = (mu1.z' - mu2.z') / (2 mu2.mu1 - mu2.mu2 - mu1.mu1)
//! z*     = normalize(z' - lambda mu2 + lambda mu1)
//! ```
//!
//! [`solve_numeric_oracle`] reaches the same point by iterated ascent with
//! alternating hyperplane projections and is kept as an independent check.

use serde::{Deserialize, Serialize};

use crate::error::{BendError, Result};
use crate::index::{LabeledEmbeddingTable, RelevantSubsets};
use crate::metrics::ccf_distance;
use crate::subspace::{gram_schmidt, orthogonalize, AttributeMatrix};
use crate::vector::{self, check_dim, dot, Embedding};

/// Gap `|mu1.z' - mu2.z'|` below which `z'` is returned unchanged.
pub const FEASIBLE_GAP: f64 = 1e-12;
/// Means closer than this are treated as identical.
pub const MEAN_EPS: f64 = 1e-10;
/// Relative tolerance for dropping dependent constraint directions.
const CONSTRAINT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    AnalyticBinary,
    ProjectionGeneral,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EqualizationSolution {
    pub z_star: Embedding,
    /// Lagrange multiplier; binary solver only.
    pub lambda: Option<f64>,
    /// `|mu_i . z* - mu_1 . z*|` for `i = 2..K`.
    pub residuals: Vec<f64>,
    pub method: SolveMethod,
    /// Outer iterations; numeric solver only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

impl EqualizationSolution {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

fn residuals(z: &[f64], means: &[Embedding]) -> Vec<f64> {
    let base = dot(means[0].as_slice(), z);
    means[1..]
        .iter()
        .map(|m| (dot(m.as_slice(), z) - base).abs())
        .collect()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn check_means(z_prime: &Embedding, means: &[Embedding]) -> Result<()> {
    if means.len() < 2 {
        return Err(BendError::Config(format!(
            "equalization needs at least 2 group means, got {}",
            means.len()
        )));
    }
    for m in means {
        check_dim(z_prime.dim(), m.dim())?;
    }
    Ok(())
}

/// Two-group closed form.
///
/// `mu1` and `mu2` are the raw (unnormalized) group means. The denominator
/// `2 mu2.mu1 - mu2.mu2 - mu1.mu1` equals `-|mu1 - mu2|^2` and is evaluated in
/// that form, which avoids cancellation when the means are close.
pub fn solve_binary(
    z_prime: &Embedding,
    mu1: &Embedding,
    mu2: &Embedding,
) -> Result<EqualizationSolution> {
    let means = [mu1.clone(), mu2.clone()];
    check_means(z_prime, &means)?;
    let delta = diff(mu1.as_slice(), mu2.as_slice());
    let gap = dot(&delta, z_prime.as_slice());
    if gap.abs() <= FEASIBLE_GAP {
        return Ok(EqualizationSolution {
            residuals: residuals(z_prime.as_slice(), &means),
            z_star: z_prime.clone(),
            lambda: Some(0.0),
            method: SolveMethod::AnalyticBinary,
            iterations: None,
        });
    }
    let delta_sq = dot(&delta, &delta);
    if delta_sq.sqrt() <= MEAN_EPS {
        return Err(BendError::DegenerateMeans(format!(
            "means coincide (|mu1 - mu2| = {:e}) but similarities differ by {gap:e}",
            delta_sq.sqrt()
        )));
    }
    let lambda = gap / -delta_sq;
    // z' - lambda mu2 + lambda mu1 = z' + lambda (mu1 - mu2)
    let mut v = z_prime.as_slice().to_vec();
    vector::axpy(lambda, &delta, &mut v);
    let n = vector::norm(&v);
    if n < MEAN_EPS {
        return Err(BendError::ZeroResult { norm: n });
    }
    let z_star = vector::normalize_vec(v)?;
    Ok(EqualizationSolution {
        residuals: residuals(z_star.as_slice(), &means),
        z_star,
        lambda: Some(lambda),
        method: SolveMethod::AnalyticBinary,
        iterations: None,
    })
}

/// Any number of groups: normalized projection of `z'` onto the orthogonal
/// complement of `span{mu_k - mu_1}`.
///
/// When every mean coincides the constraints are vacuous and `z'` is returned.
pub fn solve_general(z_prime: &Embedding, means: &[Embedding]) -> Result<EqualizationSolution> {
    check_means(z_prime, means)?;
    let deltas: Vec<Vec<f64>> = means[1..]
        .iter()
        .map(|m| diff(m.as_slice(), means[0].as_slice()))
        .collect();
    let (basis, _) = gram_schmidt(&deltas, CONSTRAINT_RANK_TOL, MEAN_EPS);
    if basis.is_empty() {
        return Ok(EqualizationSolution {
            residuals: residuals(z_prime.as_slice(), means),
            z_star: z_prime.clone(),
            lambda: None,
            method: SolveMethod::ProjectionGeneral,
            iterations: None,
        });
    }
    let projected = vector::project_out(z_prime, &basis);
    let n = projected.norm();
    if n < MEAN_EPS {
        return Err(BendError::QueryInsideConstraintSpan { residual: n });
    }
    let z_star = vector::normalize(&projected)?;
    Ok(EqualizationSolution {
        residuals: residuals(z_star.as_slice(), means),
        z_star,
        lambda: None,
        method: SolveMethod::ProjectionGeneral,
        iterations: None,
    })
}

pub const ORACLE_MAX_ITERATIONS: usize = 10_000;
const ORACLE_STEP: f64 = 1.0;
const ORACLE_MAX_SWEEPS: usize = 100_000;

/// Projects `y` onto `{x : n_k . x = 0 for all k}` by cycling orthogonal
/// projections onto each hyperplane until the largest violation is negligible.
fn alternating_projection(y: &mut [f64], normals: &[(Vec<f64>, f64)]) {
    for _ in 0..ORACLE_MAX_SWEEPS {
        let mut worst = 0.0f64;
        for (n, n_sq) in normals {
            let c = dot(n, y);
            worst = worst.max(c.abs() / n_sq.sqrt());
            vector::axpy(-c / n_sq, n, y);
        }
        if worst <= 1e-15 * vector::norm(y).max(1.0) {
            break;
        }
    }
}

/// Projected ascent on the sphere: step toward `z'`, project onto the
/// feasible subspace, renormalize; stop when the step is below `tol`.
pub fn solve_numeric_oracle(
    z_prime: &Embedding,
    means: &[Embedding],
    tol: f64,
) -> Result<EqualizationSolution> {
    check_means(z_prime, means)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(BendError::Config(format!("tolerance must be positive, got {tol}")));
    }
    let normals: Vec<(Vec<f64>, f64)> = means[1..]
        .iter()
        .map(|m| diff(m.as_slice(), means[0].as_slice()))
        .filter_map(|d| {
            let sq = dot(&d, &d);
            (sq.sqrt() > MEAN_EPS).then_some((d, sq))
        })
        .collect();
    let target = z_prime.as_slice();
    let mut z = target.to_vec();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < ORACLE_MAX_ITERATIONS {
        iterations += 1;
        let mut y = z.clone();
        vector::axpy(ORACLE_STEP, target, &mut y);
        alternating_projection(&mut y, &normals);
        let n = vector::norm(&y);
        if n < MEAN_EPS {
            return Err(BendError::QueryInsideConstraintSpan { residual: n });
        }
        vector::scale_in_place(&mut y, 1.0 / n);
        let step = vector::norm(&diff(&y, &z));
        z = y;
        if step < tol {
            converged = true;
            break;
        }
    }
    let res = residuals(&z, means);
    let worst = res.iter().copied().fold(0.0, f64::max);
    if !converged && worst > 1e-6 {
        return Err(BendError::NoConvergence {
            iterations,
            residual: worst,
        });
    }
    Ok(EqualizationSolution {
        z_star: vector::normalize_vec(z)?,
        lambda: None,
        residuals: res,
        method: SolveMethod::Numeric,
        iterations: Some(iterations),
    })
}

/// Binary closed form for two means, projection form otherwise.
pub fn equalize(z_prime: &Embedding, means: &[Embedding]) -> Result<EqualizationSolution> {
    match means {
        [mu1, mu2] => solve_binary(z_prime, mu1, mu2),
        _ => solve_general(z_prime, means),
    }
}

/// Which stages of the two-step procedure run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DebiasMode {
    Baseline,
    Step1Only,
    Step2Only,
    Full,
}

impl DebiasMode {
    pub const ALL: [DebiasMode; 4] = [
        DebiasMode::Baseline,
        DebiasMode::Step1Only,
        DebiasMode::Step2Only,
        DebiasMode::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DebiasMode::Baseline => "baseline",
            DebiasMode::Step1Only => "step1-only",
            DebiasMode::Step2Only => "step2-only",
            DebiasMode::Full => "full",
        }
    }

    pub fn uses_step1(self) -> bool {
        matches!(self, DebiasMode::Step1Only | DebiasMode::Full)
    }

    pub fn uses_step2(self) -> bool {
        matches!(self, DebiasMode::Step2Only | DebiasMode::Full)
    }
}

impl std::fmt::Display for DebiasMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DebiasMode {
    type Err = BendError;

    fn from_str(s: &str) -> Result<Self> {
        DebiasMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                BendError::Config(format!(
                    "unknown mode {s:?} (expected baseline, step1-only, step2-only or full)"
                ))
            })
    }
}

/// CCF distance of each stage's embedding, measured on the same relevant sets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageCcf {
    pub baseline: f64,
    pub step1: Option<f64>,
    pub step2: Option<f64>,
}

/// Everything one debiasing run produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DebiasReport {
    pub mode: DebiasMode,
    pub baseline: Embedding,
    pub step1: Option<Embedding>,
    pub step2: Option<Embedding>,
    pub output: Embedding,
    pub lambda: Option<f64>,
    pub residuals: Vec<f64>,
    pub method: Option<SolveMethod>,
    pub dropped_columns: Option<usize>,
    pub subspace_rank: Option<usize>,
    /// Attribute values, in the order of `n_used`.
    pub values: Vec<String>,
    pub n_used: Vec<usize>,
    pub ccf: StageCcf,
}

/// Runs the stages selected by `mode` on `query`.
///
/// `subsets` are the relevant reference sets used both for equalization and
/// for the per-stage CCF distances; their rows index into `reference`.
/// `matrix` is required when the mode includes step 1.
pub fn debias(
    query: &Embedding,
    matrix: Option<&AttributeMatrix>,
    subsets: &RelevantSubsets,
    reference: &LabeledEmbeddingTable,
    mode: DebiasMode,
) -> Result<DebiasReport> {
    check_dim(reference.dim(), query.dim())?;
    let groups = subsets.groups(reference);
    let ccf = |z: &Embedding| ccf_distance(z, &groups);

    let step1 = if mode.uses_step1() {
        let matrix = matrix.ok_or_else(|| {
            BendError::Config(format!("mode {mode} needs an attribute matrix"))
        })?;
        Some(orthogonalize(query, matrix)?)
    } else {
        None
    };
    let solution = if mode.uses_step2() {
        let start = step1.as_ref().unwrap_or(query);
        Some(equalize(start, &subsets.means)?)
    } else {
        None
    };
    let step2 = solution.as_ref().map(|s| s.z_star.clone());
    let output = step2
        .clone()
        .or_else(|| step1.clone())
        .unwrap_or_else(|| query.clone());
    Ok(DebiasReport {
        mode,
        ccf: StageCcf {
            baseline: ccf(query)?,
            step1: step1.as_ref().map(ccf).transpose()?,
            step2: step2.as_ref().map(ccf).transpose()?,
        },
        baseline: query.clone(),
        step1,
        step2,
        output,
        lambda: solution.as_ref().and_then(|s| s.lambda),
        residuals: solution.as_ref().map(|s| s.residuals.clone()).unwrap_or_default(),
        method: solution.as_ref().map(|s| s.method),
        dropped_columns: matrix.filter(|_| mode.uses_step1()).map(|m| m.dropped_count()),
        subspace_rank: matrix.filter(|_| mode.uses_step1()).map(|m| m.rank()),
        values: subsets.values.clone(),
        n_used: subsets.n_used(),
    })
}
