//! Closed-form first-order quantities for split steps and the sufficient
//! conditions/bounds built on them, plus a central-difference oracle.
//!
//! All gradients taken here are H-gradients (`H⁻¹∇L`); the tangent space
//! `T_r` is whatever the basis spans in whitened coordinates.

use crate::error::{check_dim, GuError, Result};
use crate::linalg::{dot, norm};
use crate::metric::DiagonalMetric;
use crate::models::Objective;
use crate::subspace::RetainBasis;

/// Components of the exact first-order change of `L_f + α L_r` under a split step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderReport {
    pub predicted_retain_change: f64,
    pub predicted_joint_change: f64,
    /// `<P_T g_f, g_r>_H`
    pub cross_term: f64,
    /// `‖P⊥ g_f‖²_H`
    pub perp_energy: f64,
    /// `‖P_T g_f‖²_H`
    pub tangent_energy: f64,
    /// `‖g_r‖²_H`
    pub retain_energy: f64,
}

/// Sufficient conditions for a nonpositive joint first-order change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionFlags {
    pub case_a: bool,
    /// `None` when α = 0 (condition undefined).
    pub case_b: Option<bool>,
    pub case_c: bool,
}

impl ConditionFlags {
    pub fn any(&self) -> bool {
        self.case_a || self.case_b == Some(true) || self.case_c
    }
}

/// `-ρβ‖g_r‖²_H`
pub fn predicted_retain_change(rho: f64, beta: f64, retain_h_grad: &[f64], metric: &DiagonalMetric) -> Result<f64> {
    Ok(-rho * beta * metric.norm_sq(retain_h_grad)?)
}

pub fn predicted_joint_change(
    rho: f64,
    alpha: f64,
    beta: f64,
    forget_h_grad: &[f64],
    retain_h_grad: &[f64],
    basis: &RetainBasis,
    metric: &DiagonalMetric,
) -> Result<FirstOrderReport> {
    check_dim(metric.dim(), basis.dim())?;
    let f = metric.whiten(forget_h_grad)?;
    let r = metric.whiten(retain_h_grad)?;
    let tangent = basis.project_tangent(&f)?;
    let normal: Vec<f64> = f.iter().zip(&tangent).map(|(a, b)| a - b).collect();
    let perp_energy = dot(&normal, &normal);
    let tangent_energy = dot(&tangent, &tangent);
    let retain_energy = dot(&r, &r);
    let cross_term = dot(&tangent, &r);
    Ok(FirstOrderReport {
        predicted_retain_change: -rho * beta * retain_energy,
        predicted_joint_change: -rho * (perp_energy + alpha * beta * retain_energy + beta * cross_term),
        cross_term,
        perp_energy,
        tangent_energy,
        retain_energy,
    })
}

pub fn nonpositivity_conditions(alpha: f64, beta: f64, report: &FirstOrderReport) -> ConditionFlags {
    let case_b = if alpha > 0.0 {
        Some(
            report.perp_energy + 0.5 * alpha * beta * report.retain_energy
                >= beta / (2.0 * alpha) * report.tangent_energy,
        )
    } else {
        None
    };
    ConditionFlags {
        case_a: beta == 0.0,
        case_b,
        case_c: alpha * report.retain_energy.sqrt() >= report.tangent_energy.sqrt(),
    }
}

/// Largest step size for which the retain loss strictly decreases under an
/// `L`-smooth (in `‖·‖_H`) retain objective; zero in the neutral regime β = 0.
pub fn descent_stepsize_bound(beta: f64, retain_energy: f64, perp_energy: f64, lipschitz_h: f64) -> f64 {
    let denom = lipschitz_h * (perp_energy + beta * beta * retain_energy);
    if beta == 0.0 || retain_energy == 0.0 || denom <= 0.0 {
        return 0.0;
    }
    2.0 * beta * retain_energy / denom
}

/// Retain-side smoothness bound on `L_r(θ+Δθ) - L_r(θ)` for a split step.
pub fn retain_change_upper_bound(rho: f64, beta: f64, retain_energy: f64, perp_energy: f64, lipschitz_h: f64) -> f64 {
    -rho * beta * retain_energy + 0.5 * lipschitz_h * rho * rho * (perp_energy + beta * beta * retain_energy)
}

/// Upper bound on the joint objective change:
/// `Δ⁽¹⁾ + ((L_f + α L_r)/2) ‖Δθ‖²_H`.
pub fn joint_descent_bound(
    alpha: f64,
    report: &FirstOrderReport,
    lipschitz_f: f64,
    lipschitz_r: f64,
    step_norm_sq: f64,
) -> f64 {
    report.predicted_joint_change + 0.5 * (lipschitz_f + alpha * lipschitz_r) * step_norm_sq
}

#[derive(Debug, Clone, PartialEq)]
pub enum SteepestDirection {
    /// Unit-H-norm direction `-P⊥g_f / ‖P⊥g_f‖_H`.
    Direction(Vec<f64>),
    /// `P⊥g_f` vanished: every feasible unit vector is first-order optimal.
    Degenerate,
}

pub fn steepest_feasible_direction(
    forget_h_grad: &[f64],
    basis: &RetainBasis,
    metric: &DiagonalMetric,
) -> Result<SteepestDirection> {
    check_dim(metric.dim(), basis.dim())?;
    let f = metric.whiten(forget_h_grad)?;
    let normal = basis.project_normal(&f)?;
    let n = norm(&normal);
    if n <= 1e-12 * norm(&f) || n == 0.0 {
        return Ok(SteepestDirection::Degenerate);
    }
    let unit: Vec<f64> = normal.iter().map(|x| -x / n).collect();
    Ok(SteepestDirection::Direction(metric.dewhiten(&unit)?))
}

/// Central-difference directional derivative `(L(θ+hd) - L(θ-hd)) / 2h`.
pub fn finite_difference_directional(
    objective: &dyn Objective,
    theta: &[f64],
    direction: &[f64],
    step: f64,
) -> Result<f64> {
    check_dim(theta.len(), direction.len())?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(GuError::InvalidInput(format!("finite-difference step must be positive, got {step}")));
    }
    let plus: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t + step * d).collect();
    let minus: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t - step * d).collect();
    let lp = objective.loss(&plus)?;
    let lm = objective.loss(&minus)?;
    if !(lp.is_finite() && lm.is_finite()) {
        return Err(GuError::NonFinite("loss"));
    }
    Ok((lp - lm) / (2.0 * step))
}

/// Step schedule for the Richardson-style consistency check.
pub const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Directional derivative estimates at [`FD_STEPS`] together with the
/// Richardson extrapolation of the two coarsest ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdEstimate {
    pub estimates: [f64; 3],
    pub richardson: f64,
    /// Largest disagreement between any estimate and the extrapolated value.
    pub spread: f64,
}

pub fn finite_difference_schedule(objective: &dyn Objective, theta: &[f64], direction: &[f64]) -> Result<FdEstimate> {
    let mut estimates = [0.0; 3];
    for (e, &h) in estimates.iter_mut().zip(&FD_STEPS) {
        *e = finite_difference_directional(objective, theta, direction, h)?;
    }
    // Central differences have O(h²) truncation; steps differ by 10×.
    let richardson = (100.0 * estimates[1] - estimates[0]) / 99.0;
    let spread = estimates.iter().fold(0.0_f64, |m, e| m.max((e - richardson).abs()));
    Ok(FdEstimate { estimates, richardson, spread })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConstantObjective, QuadraticObjective};

    fn e(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn retain_change_examples() {
        let m = DiagonalMetric::identity(2);
        assert_eq!(predicted_retain_change(1.0, 0.0, &[3.0, 1.0], &m).unwrap(), 0.0);
        assert_eq!(predicted_retain_change(1.0, 1.0, &[2.0, 0.0], &m).unwrap(), -4.0);
    }

    #[test]
    fn joint_change_hand_instance() {
        let m = DiagonalMetric::identity(3);
        let b = RetainBasis::from_columns(3, 4, &[e(3, 0)]).unwrap();
        let rep = predicted_joint_change(1.0, 1.0, 1.0, &[3.0, 4.0, 0.0], &[2.0, 0.0, 0.0], &b, &m).unwrap();
        assert_eq!(rep.predicted_joint_change, -26.0);
        assert_eq!(rep.perp_energy, 16.0);
        assert_eq!(rep.tangent_energy, 9.0);
        assert_eq!(rep.retain_energy, 4.0);
        assert_eq!(rep.cross_term, 6.0);
        let rep0 = predicted_joint_change(1.0, 1.0, 0.0, &[3.0, 4.0, 0.0], &[2.0, 0.0, 0.0], &b, &m).unwrap();
        assert_eq!(rep0.predicted_joint_change, -16.0);

        let flags = nonpositivity_conditions(1.0, 1.0, &rep);
        assert!(!flags.case_a);
        assert_eq!(flags.case_b, Some(true));
        assert!(!flags.case_c);
        assert!(nonpositivity_conditions(1.0, 0.0, &rep0).case_a);
        assert_eq!(nonpositivity_conditions(0.0, 1.0, &rep).case_b, None);
    }

    #[test]
    fn stepsize_bound_examples() {
        assert_eq!(descent_stepsize_bound(0.0, 4.0, 16.0, 2.0), 0.0);
        assert!((descent_stepsize_bound(1.0, 4.0, 16.0, 2.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn joint_bound_zero_step() {
        let rep = FirstOrderReport {
            predicted_retain_change: 0.0,
            predicted_joint_change: 0.0,
            cross_term: 0.0,
            perp_energy: 0.0,
            tangent_energy: 0.0,
            retain_energy: 0.0,
        };
        assert_eq!(joint_descent_bound(1.0, &rep, 3.0, 2.0, 0.0), 0.0);
    }

    #[test]
    fn steepest_examples() {
        let m = DiagonalMetric::identity(3);
        let b = RetainBasis::from_columns(3, 4, &[e(3, 0)]).unwrap();
        assert_eq!(
            steepest_feasible_direction(&[3.0, 4.0, 0.0], &b, &m).unwrap(),
            SteepestDirection::Direction(vec![-0.0, -1.0, -0.0])
        );
        assert_eq!(steepest_feasible_direction(&[3.0, 0.0, 0.0], &b, &m).unwrap(), SteepestDirection::Degenerate);
    }

    #[test]
    fn finite_difference_examples() {
        let c = ConstantObjective { dim: 2, value: 3.5 };
        assert_eq!(finite_difference_directional(&c, &[1.0, 2.0], &[1.0, 0.0], 1e-3).unwrap(), 0.0);
        let q = QuadraticObjective::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        for h in [1e-1, 1e-2, 0.5] {
            let d = finite_difference_directional(&q, &[1.0, 0.0], &[1.0, 0.0], h).unwrap();
            assert!((d - 1.0).abs() < 1e-14);
        }
        assert!(finite_difference_directional(&q, &[1.0, 0.0], &[1.0, 0.0], 0.0).is_err());
    }
}
