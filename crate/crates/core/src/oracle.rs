//! Dense reference implementations and random instance generators used by
//! `selftest` and the test suites.
//!
//! The dense projector is built from the textbook formula
//! `P_T = V (Vᵀ H V)⁻¹ Vᵀ H` over raw spanning vectors `V`, with no
//! orthonormalization, so it checks the incremental basis independently.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GuError, Result};
use crate::metric::DiagonalMetric;
use crate::subspace::RetainBasis;

/// `V (VᵀHV)⁻¹ VᵀH` for raw columns `V` (any spanning set of full column rank).
pub fn dense_tangent_projector(raw_columns: &[Vec<f64>], metric: &DiagonalMetric) -> Result<DMatrix<f64>> {
    let p = metric.dim();
    if raw_columns.is_empty() {
        return Ok(DMatrix::zeros(p, p));
    }
    let v = DMatrix::from_fn(p, raw_columns.len(), |i, j| raw_columns[j][i]);
    let h = DMatrix::from_diagonal(&DVector::from_column_slice(metric.diag_h()));
    let gram = v.transpose() * &h * &v;
    let inv = gram.try_inverse().ok_or_else(|| GuError::InvalidInput("raw columns are linearly dependent".into()))?;
    Ok(&v * inv * v.transpose() * h)
}

/// `I - P_T`
pub fn dense_normal_projector(raw_columns: &[Vec<f64>], metric: &DiagonalMetric) -> Result<DMatrix<f64>> {
    let p = metric.dim();
    Ok(DMatrix::identity(p, p) - dense_tangent_projector(raw_columns, metric)?)
}

/// `P_T v` by a Cholesky solve of the Gram system `(VᵀHV) c = VᵀHv`, the
/// numerically preferable way to apply the same formula to one vector.
pub fn dense_project_tangent(raw_columns: &[Vec<f64>], metric: &DiagonalMetric, v: &[f64]) -> Result<Vec<f64>> {
    let p = metric.dim();
    crate::error::check_dim(p, v.len())?;
    if raw_columns.is_empty() {
        return Ok(vec![0.0; p]);
    }
    let vm = DMatrix::from_fn(p, raw_columns.len(), |i, j| raw_columns[j][i]);
    let hv = DMatrix::from_fn(p, raw_columns.len(), |i, j| metric.diag_h()[i] * raw_columns[j][i]);
    let gram = vm.transpose() * &hv;
    let rhs = hv.transpose() * DVector::from_column_slice(v);
    let c =
        gram.cholesky().ok_or_else(|| GuError::InvalidInput("raw columns are linearly dependent".into()))?.solve(&rhs);
    Ok((vm * c).as_slice().to_vec())
}

/// `‖a - b‖_H / ‖reference‖_H`
pub fn h_rel_err(a: &[f64], b: &[f64], reference: &[f64], metric: &DiagonalMetric) -> f64 {
    let d = metric.norm(&crate::linalg::sub(a, b)).unwrap_or(f64::INFINITY);
    let n = metric.norm(reference).unwrap_or(0.0);
    if n > 0.0 {
        d / n
    } else {
        d
    }
}

pub fn apply(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).as_slice().to_vec()
}

/// Projects a raw-coordinate vector through the basis (whiten, project, de-whiten).
pub fn basis_tangent_raw(basis: &RetainBasis, metric: &DiagonalMetric, v: &[f64]) -> Result<Vec<f64>> {
    metric.dewhiten(&basis.project_tangent(&metric.whiten(v)?)?)
}

pub fn basis_normal_raw(basis: &RetainBasis, metric: &DiagonalMetric, v: &[f64]) -> Result<Vec<f64>> {
    metric.dewhiten(&basis.project_normal(&metric.whiten(v)?)?)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

/// Metric from random second moments spanning several orders of magnitude.
pub fn random_metric(rng: &mut ChaCha8Rng, dim: usize) -> DiagonalMetric {
    let v: Vec<f64> = (0..dim).map(|_| 10f64.powf(rng.random_range(-4.0..1.0))).collect();
    DiagonalMetric::from_second_moments(&v, crate::metric::DEFAULT_EPSILON).expect("positive second moments")
}

/// A random instance of a retain basis: `rank` raw gradients and the basis
/// built from them under `metric` (keep threshold 0).
pub struct RandomBasis {
    pub raw: Vec<Vec<f64>>,
    pub basis: RetainBasis,
}

pub fn random_basis(rng: &mut ChaCha8Rng, metric: &DiagonalMetric, rank: usize) -> Result<RandomBasis> {
    let dim = metric.dim();
    let mut basis = RetainBasis::new(dim, rank.max(1), 0.0)?;
    let mut raw = Vec::with_capacity(rank);
    while raw.len() < rank {
        let g = gaussian_vec(rng, dim);
        if basis.insert(&metric.whiten(&g)?)?.inserted {
            raw.push(g);
        }
    }
    Ok(RandomBasis { raw, basis })
}

/// A random vector in the span of the raw columns.
pub fn random_in_span(rng: &mut ChaCha8Rng, raw: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for col in raw {
        let c: f64 = rng.sample(rand_distr::StandardNormal);
        crate::linalg::axpy(c, col, &mut v);
    }
    v
}

/// `‖a - b‖ / ‖b‖` (absolute when `b` vanishes).
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = crate::linalg::norm(&crate::linalg::sub(a, b));
    let n = crate::linalg::norm(b);
    if n > 0.0 {
        d / n
    } else {
        d
    }
}

/// Central-difference gradient, one coordinate at a time.
pub fn fd_gradient(objective: &dyn crate::models::Objective, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; theta.len()];
    let mut t = theta.to_vec();
    for i in 0..theta.len() {
        let orig = t[i];
        t[i] = orig + h;
        let lp = objective.loss(&t)?;
        t[i] = orig - h;
        let lm = objective.loss(&t)?;
        t[i] = orig;
        g[i] = (lp - lm) / (2.0 * h);
    }
    Ok(g)
}
