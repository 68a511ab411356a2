//! Optimizer-induced diagonal SPD metric.
//!
//! An adaptive optimizer with second-moment estimate `v` defines the whitener
//! `W = diag(1 / sqrt(v + eps))` and the metric `H = WᵀW`. Under `H`,
//! `<u, v>_H = uᵀ H v`, and whitening (`ṽ = W v`) turns that inner product
//! into the Euclidean one. Everything downstream (basis, projectors, step
//! composition) consumes a frozen snapshot of this type.

use crate::error::{check_dim, GuError, Result};
use crate::linalg;

/// Default epsilon added to second moments before inversion.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMetric {
    diag_h: Vec<f64>,
    whitener: Vec<f64>,
    epsilon: f64,
}

impl DiagonalMetric {
    /// Builds `W = diag(1/sqrt(v_hat + eps))` and `H = WᵀW`.
    pub fn from_second_moments(v_hat: &[f64], epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(GuError::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        let mut whitener = Vec::with_capacity(v_hat.len());
        for &v in v_hat {
            if !v.is_finite() {
                return Err(GuError::NonFinite("second moments"));
            }
            if v < 0.0 {
                return Err(GuError::InvalidInput(format!("negative second moment {v}")));
            }
            whitener.push(1.0 / (v + epsilon).sqrt());
        }
        let diag_h = whitener.iter().map(|w| w * w).collect();
        Ok(Self { diag_h, whitener, epsilon })
    }

    /// Builds a metric from explicit diagonal entries, all of which must be
    /// finite and strictly positive.
    pub fn from_diag(diag_h: Vec<f64>) -> Result<Self> {
        for &h in &diag_h {
            if !h.is_finite() {
                return Err(GuError::NonFinite("metric diagonal"));
            }
            if h <= 0.0 {
                return Err(GuError::InvalidInput(format!("metric entry {h} is not positive")));
            }
        }
        let whitener = diag_h.iter().map(|h| h.sqrt()).collect();
        Ok(Self { diag_h, whitener, epsilon: 0.0 })
    }

    pub fn identity(dim: usize) -> Self {
        Self { diag_h: vec![1.0; dim], whitener: vec![1.0; dim], epsilon: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.diag_h.len()
    }

    pub fn diag_h(&self) -> &[f64] {
        &self.diag_h
    }

    pub fn whitener(&self) -> &[f64] {
        &self.whitener
    }

    /// Epsilon used at construction; zero for metrics built from an explicit diagonal.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `uᵀ H v`
    pub fn inner(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        check_dim(self.dim(), u.len())?;
        check_dim(self.dim(), v.len())?;
        Ok(u.iter().zip(v).zip(&self.diag_h).map(|((a, b), h)| a * h * b).sum())
    }

    pub fn norm(&self, v: &[f64]) -> Result<f64> {
        Ok(self.inner(v, v)?.max(0.0).sqrt())
    }

    pub fn norm_sq(&self, v: &[f64]) -> Result<f64> {
        self.inner(v, v)
    }

    /// `W v`
    pub fn whiten(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(v.iter().zip(&self.whitener).map(|(x, w)| x * w).collect())
    }

    /// `W⁻¹ v`
    pub fn dewhiten(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(v.iter().zip(&self.whitener).map(|(x, w)| x / w).collect())
    }

    /// The H-gradient `H⁻¹ g`, the representer of `g` under `<·,·>_H`.
    pub fn h_gradient(&self, euclidean_grad: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), euclidean_grad.len())?;
        Ok(euclidean_grad.iter().zip(&self.diag_h).map(|(g, h)| g / h).collect())
    }

    /// Inverse of [`h_gradient`](Self::h_gradient): `H v`.
    pub fn lower(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(v.iter().zip(&self.diag_h).map(|(x, h)| x * h).collect())
    }
}

/// Free-function form of [`DiagonalMetric::from_second_moments`].
pub fn metric_from_second_moments(v_hat: &[f64], epsilon: f64) -> Result<DiagonalMetric> {
    DiagonalMetric::from_second_moments(v_hat, epsilon)
}

pub fn inner(u: &[f64], v: &[f64], m: &DiagonalMetric) -> Result<f64> {
    m.inner(u, v)
}

pub fn norm(v: &[f64], m: &DiagonalMetric) -> Result<f64> {
    m.norm(v)
}

pub fn whiten(v: &[f64], m: &DiagonalMetric) -> Result<Vec<f64>> {
    m.whiten(v)
}

pub fn dewhiten(v: &[f64], m: &DiagonalMetric) -> Result<Vec<f64>> {
    m.dewhiten(v)
}

pub fn h_gradient(euclidean_grad: &[f64], m: &DiagonalMetric) -> Result<Vec<f64>> {
    m.h_gradient(euclidean_grad)
}

/// Euclidean inner product of whitened vectors; equals `inner` on raw vectors.
pub fn whitened_inner(u: &[f64], v: &[f64], m: &DiagonalMetric) -> Result<f64> {
    Ok(linalg::dot(&m.whiten(u)?, &m.whiten(v)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn random_metric(rng: &mut ChaCha8Rng, dim: usize) -> DiagonalMetric {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..4.0)).collect();
        DiagonalMetric::from_second_moments(&v, 1e-3).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_moments_unit_epsilon_is_identity() {
        let m = DiagonalMetric::from_second_moments(&[0.0; 5], 1.0).unwrap();
        assert_eq!(m.diag_h(), &[1.0; 5]);
    }

    #[test]
    fn single_coordinate_construction() {
        let m = DiagonalMetric::from_second_moments(&[3.0], 1.0).unwrap();
        assert_eq!(m.diag_h(), &[0.25]);
        assert_eq!(m.whitener(), &[0.5]);
    }

    #[test]
    fn construction_matches_recomputed_whitener() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..10.0)).collect();
        let eps = 1e-8;
        let m = DiagonalMetric::from_second_moments(&v, eps).unwrap();
        for (i, &vi) in v.iter().enumerate() {
            let w = 1.0 / (vi + eps).sqrt();
            assert_eq!(m.diag_h()[i], w * w);
            assert_eq!(m.whitener()[i] * m.whitener()[i], m.diag_h()[i]);
        }
    }

    #[test]
    fn rejects_bad_second_moments() {
        assert!(matches!(DiagonalMetric::from_second_moments(&[1.0, -0.5], 1e-8), Err(GuError::InvalidInput(_))));
        assert!(matches!(DiagonalMetric::from_second_moments(&[f64::NAN], 1e-8), Err(GuError::NonFinite(_))));
        assert!(DiagonalMetric::from_second_moments(&[1.0], 0.0).is_err());
        assert!(DiagonalMetric::from_diag(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn inner_basic_cases() {
        let m = DiagonalMetric::from_diag(vec![4.0, 2.0, 7.0]).unwrap();
        assert_eq!(m.inner(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(m.inner(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 4.0);
        assert!(matches!(m.inner(&[1.0], &[1.0, 2.0, 3.0]), Err(GuError::DimensionMismatch { .. })));
    }

    #[test]
    fn inner_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_metric(&mut rng, 6);
        let u = random_vec(&mut rng, 6);
        let v = random_vec(&mut rng, 6);
        let dense = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(m.diag_h().to_vec()));
        let du = nalgebra::DVector::from_vec(u.clone());
        let dv = nalgebra::DVector::from_vec(v.clone());
        let oracle = (du.transpose() * dense * dv)[(0, 0)];
        assert!(rel(m.inner(&u, &v).unwrap(), oracle) <= 1e-12);
        assert_eq!(m.inner(&u, &v).unwrap(), m.inner(&v, &u).unwrap());
    }

    #[test]
    fn norm_cases() {
        let m = DiagonalMetric::from_diag(vec![9.0, 1.0]).unwrap();
        assert_eq!(m.norm(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(m.norm(&[1.0, 0.0]).unwrap(), 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_metric(&mut rng, 9);
        let v = random_vec(&mut rng, 9);
        assert_eq!(m.norm(&v).unwrap(), m.inner(&v, &v).unwrap().sqrt());
    }

    #[test]
    fn whitening_identity_metric_is_noop() {
        let m = DiagonalMetric::identity(4);
        let v = vec![1.0, -2.0, 3.5, 0.0];
        assert_eq!(m.whiten(&v).unwrap(), v);
        assert_eq!(m.dewhiten(&v).unwrap(), v);
    }

    #[test]
    fn whitening_round_trip_and_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let m = random_metric(&mut rng, 16);
            let u = random_vec(&mut rng, 16);
            let v = random_vec(&mut rng, 16);
            let back = m.dewhiten(&m.whiten(&v).unwrap()).unwrap();
            let scale = linalg::max_abs(&v);
            for (a, b) in back.iter().zip(&v) {
                assert!((a - b).abs() <= 1e-12 * scale);
            }
            let wi = whitened_inner(&u, &v, &m).unwrap();
            let scale = m.norm(&u).unwrap() * m.norm(&v).unwrap();
            assert!((wi - m.inner(&u, &v).unwrap()).abs() <= 1e-12 * scale);
            assert!(rel(linalg::norm(&m.whiten(&v).unwrap()), m.norm(&v).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn h_gradient_cases() {
        let id = DiagonalMetric::identity(3);
        assert_eq!(id.h_gradient(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let m = DiagonalMetric::from_diag(vec![4.0]).unwrap();
        assert_eq!(m.h_gradient(&[2.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn h_gradient_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let m = random_metric(&mut rng, 10);
            let g = random_vec(&mut rng, 10);
            let step = random_vec(&mut rng, 10);
            let lhs = m.inner(&m.h_gradient(&g).unwrap(), &step).unwrap();
            let rhs = linalg::dot(&g, &step);
            let scale = g.iter().zip(&step).map(|(a, b)| (a * b).abs()).sum::<f64>();
            assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn spd_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let m = random_metric(&mut rng, 12);
        for _ in 0..1000 {
            let v = random_vec(&mut rng, 12);
            if v.iter().any(|x| *x != 0.0) {
                assert!(m.inner(&v, &v).unwrap() > 0.0);
            }
        }
    }
}
