//! Low-rank retain-gradient basis kept in whitened coordinates.
//!
//! Columns are Euclidean-orthonormal in whitened coordinates, which is the
//! same as `UᵀHU = I` for the de-whitened columns. The tangential projector is
//! `Σ (uᵢ·v) uᵢ` and the normal projector is its complement, so no Gram
//! inverse is ever formed.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{check_dim, check_finite, GuError, Result};
use crate::linalg::{axpy, dot, norm};

pub const DEFAULT_RANK_CAP: usize = 16;
pub const DEFAULT_RESIDUAL_KEEP_THRESH: f64 = 0.1;

/// Residual ratios at or below this are treated as numerically spanned even
/// when the configured threshold is zero.
pub const MIN_RESIDUAL_RATIO: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct RetainBasis {
    dim: usize,
    columns: Vec<Vec<f64>>,
    rank_cap: usize,
    residual_keep_thresh: f64,
    insert_count: u64,
}

/// Outcome of one insertion attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Insertion {
    pub inserted: bool,
    pub residual_ratio: f64,
}

impl RetainBasis {
    pub fn new(dim: usize, rank_cap: usize, residual_keep_thresh: f64) -> Result<Self> {
        if rank_cap == 0 {
            return Err(GuError::InvalidInput("rank_cap must be positive".into()));
        }
        if !(residual_keep_thresh >= 0.0 && residual_keep_thresh.is_finite()) {
            return Err(GuError::InvalidInput(format!(
                "residual_keep_thresh must be nonnegative, got {residual_keep_thresh}"
            )));
        }
        Ok(Self { dim, columns: Vec::new(), rank_cap, residual_keep_thresh, insert_count: 0 })
    }

    /// Basis with the given columns orthonormalized in order (every column
    /// with a nonzero residual is kept, up to `rank_cap`).
    pub fn from_columns(dim: usize, rank_cap: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut basis = Self::new(dim, rank_cap, 0.0)?;
        for c in columns {
            basis.insert(c)?;
        }
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn rank_cap(&self) -> usize {
        self.rank_cap
    }

    pub fn residual_keep_thresh(&self) -> f64 {
        self.residual_keep_thresh
    }

    pub fn insert_count(&self) -> u64 {
        self.insert_count
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn clear(&mut self) {
        self.columns.clear();
    }

    /// Gram–Schmidt `v` against the basis with one re-orthogonalization sweep.
    fn residual(&self, v: &[f64]) -> Vec<f64> {
        let mut res = v.to_vec();
        for _ in 0..2 {
            for u in &self.columns {
                let c = dot(u, &res);
                axpy(-c, u, &mut res);
            }
        }
        res
    }

    /// Tries to extend the basis with a whitened retain gradient. The
    /// normalized residual is appended when its relative size exceeds the
    /// keep threshold and the rank cap has room.
    pub fn insert(&mut self, whitened_retain_grad: &[f64]) -> Result<Insertion> {
        check_dim(self.dim, whitened_retain_grad.len())?;
        check_finite(whitened_retain_grad, "retain gradient")?;
        let g_norm = norm(whitened_retain_grad);
        if g_norm == 0.0 {
            return Ok(Insertion { inserted: false, residual_ratio: 0.0 });
        }
        let res = self.residual(whitened_retain_grad);
        let res_norm = norm(&res);
        let ratio = res_norm / g_norm;
        let accept =
            ratio > self.residual_keep_thresh && ratio > MIN_RESIDUAL_RATIO && self.columns.len() < self.rank_cap;
        if accept {
            self.columns.push(res.iter().map(|x| x / res_norm).collect());
            self.insert_count += 1;
        }
        Ok(Insertion { inserted: accept, residual_ratio: ratio })
    }

    /// Coefficients `uᵢ·v` of `v` along every column.
    pub fn coefficients(&self, v_whitened: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v_whitened.len())?;
        Ok(self.columns.iter().map(|u| dot(u, v_whitened)).collect())
    }

    pub fn project_tangent(&self, v_whitened: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v_whitened.len())?;
        let mut out = vec![0.0; self.dim];
        for u in &self.columns {
            axpy(dot(u, v_whitened), u, &mut out);
        }
        Ok(out)
    }

    pub fn project_normal(&self, v_whitened: &[f64]) -> Result<Vec<f64>> {
        let t = self.project_tangent(v_whitened)?;
        Ok(v_whitened.iter().zip(&t).map(|(a, b)| a - b).collect())
    }

    /// Norm of the tangential component of a whitened forget gradient.
    pub fn entanglement(&self, forget_grad_whitened: &[f64]) -> Result<f64> {
        // The columns are orthonormal, so the tangent norm is the norm of the coefficients.
        Ok(norm(&self.coefficients(forget_grad_whitened)?))
    }

    /// Text snapshot: a `#` header with the knobs, then one column per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# dim={} rank_cap={} residual_keep_thresh={} insert_count={}\n",
            self.dim, self.rank_cap, self.residual_keep_thresh, self.insert_count
        );
        for c in &self.columns {
            let line: Vec<String> = c.iter().map(|x| format!("{x:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output. Columns are taken verbatim.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut rank_cap = DEFAULT_RANK_CAP;
        let mut thresh = DEFAULT_RESIDUAL_KEEP_THRESH;
        let mut insert_count = 0;
        let mut columns = Vec::new();
        let bad = |what: &str| GuError::InvalidInput(format!("basis snapshot: {what}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(header) = line.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    let Some((k, v)) = kv.split_once('=') else { continue };
                    match k {
                        "dim" => dim = Some(v.parse().map_err(|_| bad("dim"))?),
                        "rank_cap" => rank_cap = v.parse().map_err(|_| bad("rank_cap"))?,
                        "residual_keep_thresh" => thresh = v.parse().map_err(|_| bad("threshold"))?,
                        "insert_count" => insert_count = v.parse().map_err(|_| bad("insert_count"))?,
                        _ => {}
                    }
                }
                continue;
            }
            let col: Vec<f64> =
                line.split_whitespace().map(|t| t.parse::<f64>().map_err(|_| bad(t))).collect::<Result<_>>()?;
            columns.push(col);
        }
        let dim = dim.or_else(|| columns.first().map(Vec::len)).ok_or_else(|| bad("missing dim"))?;
        for c in &columns {
            check_dim(dim, c.len())?;
            check_finite(c, "basis snapshot")?;
        }
        if columns.len() > rank_cap {
            return Err(bad("more columns than rank_cap"));
        }
        let mut basis = Self::new(dim, rank_cap, thresh)?;
        basis.columns = columns;
        basis.insert_count = insert_count;
        Ok(basis)
    }
}

pub fn insert_retain_gradient(basis: &mut RetainBasis, whitened_retain_grad: &[f64]) -> Result<Insertion> {
    basis.insert(whitened_retain_grad)
}

pub fn project_tangent(basis: &RetainBasis, v_whitened: &[f64]) -> Result<Vec<f64>> {
    basis.project_tangent(v_whitened)
}

pub fn project_normal(basis: &RetainBasis, v_whitened: &[f64]) -> Result<Vec<f64>> {
    basis.project_normal(v_whitened)
}

pub fn entanglement(basis: &RetainBasis, forget_grad_whitened: &[f64]) -> Result<f64> {
    basis.entanglement(forget_grad_whitened)
}

/// Sine of the largest principal angle between the spans of two bases.
///
/// With `B` the smaller basis, the sines of the principal angles are the
/// singular values of `(I - AAᵀ)B`; this equals `sqrt(1 - σ_min²)` of the
/// cross-Gram `AᵀB` without the cancellation near zero angles.
pub fn principal_angle_diagnostic(basis_a: &RetainBasis, basis_b: &RetainBasis) -> Result<f64> {
    check_dim(basis_a.dim, basis_b.dim)?;
    if basis_a.is_empty() || basis_b.is_empty() {
        return Err(GuError::EmptyBasis);
    }
    let (big, small) = if basis_a.rank() >= basis_b.rank() { (basis_a, basis_b) } else { (basis_b, basis_a) };
    let p = big.dim;
    let mut residual = DMatrix::<f64>::zeros(p, small.rank());
    for (j, col) in small.columns.iter().enumerate() {
        let r = big.project_normal(col)?;
        residual.set_column(j, &nalgebra::DVector::from_vec(r));
    }
    let sv = residual.singular_values();
    let s = sv.iter().fold(0.0_f64, |m, v| m.max(*v));
    Ok(s.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn randn(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
    }

    #[test]
    fn first_insertion_normalizes() {
        let mut b = RetainBasis::new(3, 4, 0.1).unwrap();
        let ins = b.insert(&[3.0, 0.0, 0.0]).unwrap();
        assert!(ins.inserted);
        assert_eq!(ins.residual_ratio, 1.0);
        assert_eq!(b.columns()[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(b.insert_count(), 1);
    }

    #[test]
    fn spanned_vector_is_not_inserted() {
        let mut b = RetainBasis::from_columns(3, 4, &[e(3, 0)]).unwrap();
        let ins = b.insert(&e(3, 0)).unwrap();
        assert!(!ins.inserted);
        assert_eq!(ins.residual_ratio, 0.0);
        assert_eq!(b.rank(), 1);
    }

    #[test]
    fn partial_residual_inserted_above_threshold() {
        let mut b = RetainBasis::new(3, 4, 0.5).unwrap();
        b.insert(&e(3, 0)).unwrap();
        let s = 0.5_f64.sqrt();
        let ins = b.insert(&[s, s, 0.0]).unwrap();
        assert!(ins.inserted);
        assert!((ins.residual_ratio - s).abs() < 1e-15);
        let col = &b.columns()[1];
        assert!((col[0]).abs() < 1e-15 && (col[1] - 1.0).abs() < 1e-15 && col[2] == 0.0);
    }

    #[test]
    fn zero_and_non_finite_inputs() {
        let mut b = RetainBasis::new(2, 4, 0.1).unwrap();
        let ins = b.insert(&[0.0, 0.0]).unwrap();
        assert!(!ins.inserted);
        assert_eq!(ins.residual_ratio, 0.0);
        assert!(matches!(b.insert(&[f64::INFINITY, 0.0]), Err(GuError::NonFinite(_))));
        assert!(matches!(b.insert(&[1.0]), Err(GuError::DimensionMismatch { .. })));
    }

    #[test]
    fn rank_cap_is_respected() {
        let mut b = RetainBasis::new(5, 2, 0.1).unwrap();
        for i in 0..5 {
            b.insert(&e(5, i)).unwrap();
        }
        assert_eq!(b.rank(), 2);
        assert_eq!(b.insert_count(), 2);
    }

    #[test]
    fn projection_examples() {
        let empty = RetainBasis::new(3, 4, 0.1).unwrap();
        assert_eq!(empty.project_tangent(&[2.0, 5.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(empty.project_normal(&[2.0, 5.0, 0.0]).unwrap(), vec![2.0, 5.0, 0.0]);
        let b = RetainBasis::from_columns(3, 4, &[e(3, 0)]).unwrap();
        assert_eq!(b.project_tangent(&[2.0, 5.0, 0.0]).unwrap(), vec![2.0, 0.0, 0.0]);
        assert_eq!(b.project_normal(&[2.0, 5.0, 0.0]).unwrap(), vec![0.0, 5.0, 0.0]);
        assert_eq!(b.entanglement(&[3.0, 4.0, 0.0]).unwrap(), 3.0);
        assert_eq!(b.entanglement(&[0.0, 4.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn projection_matches_dense_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let raw: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut rng, 10)).collect();
        let b = RetainBasis::from_columns(10, 16, &raw).unwrap();
        let u = DMatrix::from_fn(10, 3, |i, j| raw[j][i]);
        let gram_inv = (u.transpose() * &u).try_inverse().unwrap();
        let proj = &u * gram_inv * u.transpose();
        let v = randn(&mut rng, 10);
        let dense = &proj * nalgebra::DVector::from_vec(v.clone());
        let got = b.project_tangent(&v).unwrap();
        for i in 0..10 {
            assert!((got[i] - dense[i]).abs() <= 1e-10 * linalg::norm(&v));
        }
        let n = b.project_normal(&v).unwrap();
        let recon = linalg::add(&got, &n);
        for i in 0..10 {
            assert!((recon[i] - v[i]).abs() <= 1e-12 * linalg::norm(&v));
        }
        assert!((b.entanglement(&v).unwrap() - dense.norm()).abs() <= 1e-10 * linalg::norm(&v));
    }

    #[test]
    fn orthonormality_after_many_insertions() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for dim in [4usize, 16, 64] {
            let mut b = RetainBasis::new(dim, 16.min(dim), 0.0).unwrap();
            for k in 0..1000 {
                // Mix nearly dependent vectors in to stress the re-orthogonalization.
                let mut v = randn(&mut rng, dim);
                if k % 3 == 0 && !b.is_empty() {
                    let t = b.project_tangent(&v).unwrap();
                    v = linalg::lincomb(1.0, &t, 1e-6, &v);
                }
                b.insert(&v).unwrap();
                if k % 97 == 0 {
                    b.clear();
                }
            }
            for (i, ui) in b.columns().iter().enumerate() {
                assert!((linalg::norm(ui) - 1.0).abs() <= 1e-10);
                for (j, uj) in b.columns().iter().enumerate() {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((linalg::dot(ui, uj) - target).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn principal_angle_examples() {
        let a = RetainBasis::from_columns(3, 4, &[e(3, 0)]).unwrap();
        let b = RetainBasis::from_columns(3, 4, &[e(3, 1)]).unwrap();
        let s = 0.5_f64.sqrt();
        let c = RetainBasis::from_columns(3, 4, &[vec![s, s, 0.0]]).unwrap();
        assert_eq!(principal_angle_diagnostic(&a, &a).unwrap(), 0.0);
        assert!((principal_angle_diagnostic(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!((principal_angle_diagnostic(&a, &c).unwrap() - s).abs() < 1e-12);
        let empty = RetainBasis::new(3, 4, 0.1).unwrap();
        assert!(matches!(principal_angle_diagnostic(&a, &empty), Err(GuError::EmptyBasis)));
    }

    #[test]
    fn principal_angle_agrees_with_cross_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..20 {
            let cols_a: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut rng, 8)).collect();
            let cols_b: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut rng, 8)).collect();
            let a = RetainBasis::from_columns(8, 8, &cols_a).unwrap();
            let b = RetainBasis::from_columns(8, 8, &cols_b).unwrap();
            let cross = DMatrix::from_fn(3, 3, |i, j| linalg::dot(&a.columns()[i], &b.columns()[j]));
            let smin = cross.singular_values().iter().fold(f64::INFINITY, |m, v| m.min(*v));
            let oracle = (1.0 - smin * smin).max(0.0).sqrt();
            assert!((principal_angle_diagnostic(&a, &b).unwrap() - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn text_snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let cols: Vec<Vec<f64>> = (0..4).map(|_| randn(&mut rng, 6)).collect();
        let b = RetainBasis::from_columns(6, 8, &cols).unwrap();
        let text = b.to_text();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 4);
        let back = RetainBasis::from_text(&text).unwrap();
        assert_eq!(back, b);
    }
}
