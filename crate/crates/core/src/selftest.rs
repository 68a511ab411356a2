//! Built-in invariant suite run by `gu selftest`: dense-oracle projector
//! checks, closed-form identities, and finite-difference gradient checks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{finite_difference_directional, predicted_joint_change};
use crate::config::EpisodeConfig;
use crate::error::Result;
use crate::gu_step::split_step_direction;
use crate::linalg::{dot, norm};
use crate::models::{
    init_parameters, kl_retain_anchor, logistic_objective, make_task, mlp_objective, Activation, LossKind, Mlp,
    Network, Objective, QuadraticObjective,
};
use crate::oracle::{
    basis_normal_raw, basis_tangent_raw, dense_project_tangent, fd_gradient, gaussian_vec, h_rel_err, random_basis,
    random_in_span, random_metric, vec_rel_err,
};
use crate::subspace::{principal_angle_diagnostic, RetainBasis};

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestLine {
    pub name: &'static str,
    pub passed: bool,
    pub worst: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub lines: Vec<SelftestLine>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn render(&self) -> String {
        self.lines
            .iter()
            .map(|l| {
                format!(
                    "{} {} (worst {:.3e}, tolerance {:.1e})\n",
                    if l.passed { "PASS" } else { "FAIL" },
                    l.name,
                    l.worst,
                    l.tolerance
                )
            })
            .collect()
    }
}

fn line(name: &'static str, worst: Result<f64>, tolerance: f64) -> SelftestLine {
    match worst {
        Ok(w) => SelftestLine { name, passed: w <= tolerance, worst: w, tolerance },
        Err(_) => SelftestLine { name, passed: false, worst: f64::INFINITY, tolerance },
    }
}

fn projector_vs_dense(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let dim = rng.random_range(4..=32);
        let metric = random_metric(rng, dim);
        let rank = rng.random_range(0..=dim.min(16) - 1);
        let rb = random_basis(rng, &metric, rank)?;
        let v = gaussian_vec(rng, dim);
        let t = dense_project_tangent(&rb.raw, &metric, &v)?;
        let n = crate::linalg::sub(&v, &t);
        worst = worst.max(h_rel_err(&basis_tangent_raw(&rb.basis, &metric, &v)?, &t, &v, &metric));
        worst = worst.max(h_rel_err(&basis_normal_raw(&rb.basis, &metric, &v)?, &n, &v, &metric));
    }
    Ok(worst)
}

fn projector_algebra(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let dim = rng.random_range(4..=32);
        let metric = random_metric(rng, dim);
        let rank = rng.random_range(1..=dim.min(16) - 1);
        let rb = random_basis(rng, &metric, rank)?;
        let (v, w) = (gaussian_vec(rng, dim), gaussian_vec(rng, dim));
        let t = basis_tangent_raw(&rb.basis, &metric, &v)?;
        let n = basis_normal_raw(&rb.basis, &metric, &v)?;
        let tt = basis_tangent_raw(&rb.basis, &metric, &t)?;
        let vn = metric.norm_sq(&v)?;
        worst = worst.max(h_rel_err(&tt, &t, &v, &metric));
        worst = worst.max(h_rel_err(&crate::linalg::add(&t, &n), &v, &v, &metric));
        let tw = basis_tangent_raw(&rb.basis, &metric, &w)?;
        let scale = metric.norm(&v)? * metric.norm(&w)?;
        worst = worst.max((metric.inner(&t, &w)? - metric.inner(&v, &tw)?).abs() / scale);
        worst = worst.max((metric.norm_sq(&t)? + metric.norm_sq(&n)? - vn).abs() / vn);
    }
    Ok(worst)
}

fn safety_identity(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0_f64;
    for i in 0..200 {
        let dim = rng.random_range(4..=32);
        let metric = random_metric(rng, dim);
        let rank = rng.random_range(1..=dim.min(16) - 1);
        let rb = random_basis(rng, &metric, rank)?;
        let r_h = random_in_span(rng, &rb.raw, dim);
        let f_h = gaussian_vec(rng, dim);
        let rho = rng.random_range(1e-3..1.0);
        let beta = if i % 10 == 0 { 0.0 } else { rng.random_range(0.0..2.0) };
        let step = split_step_direction(&f_h, &r_h, &rb.basis, &metric, rho, beta)?;
        let direct = metric.inner(&r_h, &step)?;
        let closed = -rho * beta * metric.norm_sq(&r_h)?;
        // Errors are measured against the Cauchy–Schwarz bound of each inner product.
        let step_norm = metric.norm(&step)?;
        let scale = metric.norm(&r_h)? * step_norm;
        if beta == 0.0 {
            worst = worst.max(direct.abs() / scale);
        } else {
            worst = worst.max((direct - closed).abs() / scale);
        }
        let rep = predicted_joint_change(rho, 1.0, beta, &f_h, &r_h, &rb.basis, &metric)?;
        let joint_grad = crate::linalg::add(&f_h, &r_h);
        let joint = metric.inner(&joint_grad, &step)?;
        let jscale = metric.norm(&joint_grad)? * step_norm;
        worst = worst.max((rep.predicted_joint_change - joint).abs() / jscale);
    }
    Ok(worst)
}

fn duality(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let dim = rng.random_range(2..=16);
        let metric = random_metric(rng, dim);
        let center = gaussian_vec(rng, dim);
        let curv: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..3.0)).collect();
        let q = QuadraticObjective::new(center, curv)?;
        let theta = gaussian_vec(rng, dim);
        let d = gaussian_vec(rng, dim);
        let fd = finite_difference_directional(&q, &theta, &d, 1e-3)?;
        let hg = metric.h_gradient(&q.gradient(&theta)?)?;
        let exact = metric.inner(&hg, &d)?;
        worst = worst.max((fd - exact).abs() / (norm(&q.gradient(&theta)?) * norm(&d)));
    }
    Ok(worst)
}

fn gradient_checks(rng: &mut ChaCha8Rng) -> Result<f64> {
    let task = make_task(5, 6, 6, 0.7, rng.random())?;
    let mut objectives: Vec<(Arc<dyn Objective>, Vec<f64>)> = Vec::new();
    let logistic = logistic_objective(task.retain_as_samples(1))?;
    objectives.push((Arc::new(logistic), init_parameters(5, 0.5, 1)));
    for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softplus] {
        let mlp = mlp_objective(vec![5, 4, 3, 2], task.forget_as_samples(2), act, LossKind::CrossEntropy)?;
        let dim = mlp.dim();
        objectives.push((Arc::new(mlp), init_parameters(dim, 0.5, 2)));
    }
    let mse = mlp_objective(vec![5, 4, 2], task.retain_as_samples(2), Activation::Tanh, LossKind::Mse)?;
    let mse_dim = mse.dim();
    objectives.push((Arc::new(mse), init_parameters(mse_dim, 0.5, 3)));
    let net: Arc<dyn Network> = Arc::new(Mlp::new(vec![5, 4, 2], Activation::Tanh)?);
    let theta_ref = init_parameters(net.param_dim(), 0.8, 4);
    let anchor = kl_retain_anchor(net.clone(), &theta_ref, &task.retain_as_samples(2))?;
    objectives.push((Arc::new(anchor), init_parameters(net.param_dim(), 0.8, 5)));

    let mut worst = 0.0_f64;
    for (obj, theta) in &objectives {
        let g = obj.gradient(theta)?;
        let fd = fd_gradient(obj.as_ref(), theta, 1e-5)?;
        worst = worst.max(vec_rel_err(&g, &fd));
    }
    Ok(worst)
}

fn principal_angles(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let dim = rng.random_range(4..=24);
        let k = rng.random_range(1..=dim / 2);
        let mut a = RetainBasis::new(dim, k, 0.0)?;
        let mut b = RetainBasis::new(dim, k, 0.0)?;
        while a.rank() < k {
            a.insert(&gaussian_vec(rng, dim))?;
        }
        while b.rank() < k {
            b.insert(&gaussian_vec(rng, dim))?;
        }
        let cross = nalgebra::DMatrix::from_fn(k, k, |i, j| dot(&a.columns()[i], &b.columns()[j]));
        let smin = cross.singular_values().min().clamp(0.0, 1.0);
        let oracle = (1.0 - smin * smin).max(0.0).sqrt();
        worst = worst.max((principal_angle_diagnostic(&a, &b)? - oracle).abs());
    }
    Ok(worst)
}

fn config_round_trip() -> Result<f64> {
    let cfg = EpisodeConfig::default();
    let back = EpisodeConfig::from_text(&cfg.to_text())?;
    Ok(if back == cfg { 0.0 } else { 1.0 })
}

/// Runs every check with a fixed seed.
pub fn run_selftest() -> SelftestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let lines = vec![
        line("projector_vs_dense_oracle", projector_vs_dense(&mut rng), 1e-9),
        line("projector_algebra", projector_algebra(&mut rng), 1e-9),
        line("safety_and_joint_identities", safety_identity(&mut rng), 1e-9),
        line("metric_duality_fd", duality(&mut rng), 1e-8),
        line("model_gradients_fd", gradient_checks(&mut rng), 1e-6),
        line("principal_angle_oracle", principal_angles(&mut rng), 1e-6),
        line("config_round_trip", config_round_trip(), 0.0),
    ];
    SelftestReport { lines }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        let r = run_selftest();
        assert!(r.passed(), "{}", r.render());
    }
}
