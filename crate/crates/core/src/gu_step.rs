//! One GU update: forget-gradient recovery, sign-aware selective projection
//! with the trust-region cap, and the composed descent direction.
//!
//! Two step forms live here. [`compose_gu_direction`] is the practical form
//! whose output gradient is handed to a base optimizer. [`split_step_direction`]
//! is the theory form `Δθ = -ρ(P⊥ g_f + β P_T g_r)` over H-gradients, with ρ
//! applied directly.

use crate::error::{check_dim, GuError, Result};
use crate::linalg::{self, axpy, dot, norm};
use crate::metric::DiagonalMetric;
use crate::subspace::{RetainBasis, DEFAULT_RANK_CAP, DEFAULT_RESIDUAL_KEEP_THRESH};

pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.0;
pub const DEFAULT_REFRESH_PERIOD: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GuConfig {
    /// Forget-loss weight.
    pub gamma: f64,
    /// Retain-loss weight.
    pub alpha: f64,
    /// Tangential repair weight of the theory-form step.
    pub beta: f64,
    /// Trust-region cap on the kept tangential part, relative to the normal part.
    pub kappa: f64,
    /// Sign threshold for the tangential keep.
    pub tau: f64,
    /// Step size.
    pub rho: f64,
    pub rank_cap: usize,
    pub residual_keep_thresh: f64,
    pub refresh_period: usize,
    pub sign_aware: bool,
}

impl Default for GuConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            alpha: 1.0,
            beta: 1.0,
            kappa: DEFAULT_KAPPA,
            tau: DEFAULT_TAU,
            rho: 1e-2,
            rank_cap: DEFAULT_RANK_CAP,
            residual_keep_thresh: DEFAULT_RESIDUAL_KEEP_THRESH,
            refresh_period: DEFAULT_REFRESH_PERIOD,
            sign_aware: false,
        }
    }
}

impl GuConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GuError::InvalidInput(m));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return fail(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return fail(format!("rho must be > 0, got {}", self.rho));
        }
        if self.rank_cap == 0 {
            return fail("rank_cap must be positive".into());
        }
        if !(self.residual_keep_thresh >= 0.0 && self.residual_keep_thresh.is_finite()) {
            return fail(format!("residual_keep_thresh must be >= 0, got {}", self.residual_keep_thresh));
        }
        if self.refresh_period == 0 {
            return fail("refresh_period must be positive".into());
        }
        Ok(())
    }
}

/// Per-step gradients in raw and whitened coordinates under one metric snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub total_grad: Vec<f64>,
    pub retain_grad: Vec<f64>,
    pub forget_grad: Vec<f64>,
    pub total_whitened: Vec<f64>,
    pub retain_whitened: Vec<f64>,
    pub forget_whitened: Vec<f64>,
}

impl GradientBundle {
    /// Recovers `g_f` from the total and retain gradients and whitens all three.
    pub fn from_total(total: &[f64], retain: &[f64], cfg: &GuConfig, metric: &DiagonalMetric) -> Result<Self> {
        let forget = recover_forget_gradient(total, retain, cfg)?;
        Ok(Self {
            total_whitened: metric.whiten(total)?,
            retain_whitened: metric.whiten(retain)?,
            forget_whitened: metric.whiten(&forget)?,
            total_grad: total.to_vec(),
            retain_grad: retain.to_vec(),
            forget_grad: forget,
        })
    }

    /// Forms `γ g_f + α g_r` from the parts.
    pub fn from_parts(forget: &[f64], retain: &[f64], cfg: &GuConfig, metric: &DiagonalMetric) -> Result<Self> {
        check_dim(forget.len(), retain.len())?;
        let total = linalg::lincomb(cfg.gamma, forget, cfg.alpha, retain);
        Ok(Self {
            total_whitened: metric.whiten(&total)?,
            retain_whitened: metric.whiten(retain)?,
            forget_whitened: metric.whiten(forget)?,
            total_grad: total,
            retain_grad: retain.to_vec(),
            forget_grad: forget.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.total_grad.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Norm of the whitened forget gradient's tangential component.
    pub entanglement_before: f64,
    pub kept_index_set: Vec<usize>,
    /// Whitened norm of the kept tangential part after capping.
    pub tangential_keep_norm: f64,
    /// Whitened norm of `P⊥ g̃_f`.
    pub normal_norm: f64,
    pub cap_applied: bool,
    /// First-order change of the retain loss for the step `-ρ·direction`.
    pub predicted_retain_change: f64,
    /// First-order change of `γ L_f + α L_r` for the step `-ρ·direction`.
    pub predicted_joint_change: f64,
    /// Raw-coordinate gradient handed to the optimizer.
    pub direction: Vec<f64>,
    /// Set when the basis was empty and the projection degenerated to the identity.
    pub degenerate: bool,
}

/// `g_f = (g_tot - α g_r) / γ`
pub fn recover_forget_gradient(total_grad: &[f64], retain_grad: &[f64], cfg: &GuConfig) -> Result<Vec<f64>> {
    check_dim(total_grad.len(), retain_grad.len())?;
    if cfg.gamma == 0.0 {
        return Err(GuError::InvalidInput("gamma must be nonzero to recover the forget gradient".into()));
    }
    Ok(total_grad.iter().zip(retain_grad).map(|(t, r)| (t - cfg.alpha * r) / cfg.gamma).collect())
}

/// Keeps `aᵢuᵢ` for every column with `aᵢbᵢ < -τ`, where `aᵢ = uᵢ·forget`
/// and `bᵢ = uᵢ·retain`. Returns the kept sum and the kept indices.
pub fn sign_aware_select(
    basis: &RetainBasis,
    forget_whitened: &[f64],
    retain_whitened: &[f64],
    tau: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    check_dim(basis.dim(), forget_whitened.len())?;
    check_dim(basis.dim(), retain_whitened.len())?;
    let mut kept = vec![0.0; basis.dim()];
    let mut idx = Vec::new();
    for (i, u) in basis.columns().iter().enumerate() {
        let a = dot(u, forget_whitened);
        let b = dot(u, retain_whitened);
        if a * b < -tau {
            axpy(a, u, &mut kept);
            idx.push(i);
        }
    }
    Ok((kept, idx))
}

/// Scales `kept` down to `κ‖normal‖` when it exceeds that norm.
pub fn cap_tangential(kept_tangential: &[f64], normal_component: &[f64], kappa: f64) -> (Vec<f64>, bool) {
    let kn = norm(kept_tangential);
    let limit = kappa * norm(normal_component);
    if kn <= limit {
        (kept_tangential.to_vec(), false)
    } else {
        (linalg::scale(limit / kn, kept_tangential), true)
    }
}

/// Sign-aware keep in gradient convention.
///
/// The selector sees the forget motion direction `-g̃_f`, so a column is
/// kept when moving along it lowers the retain loss (`aᵢbᵢ > τ` for the
/// gradient coefficients). The returned vector is in gradient convention.
pub(crate) fn gradient_keep(
    basis: &RetainBasis,
    forget_whitened: &[f64],
    retain_whitened: &[f64],
    tau: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let motion: Vec<f64> = forget_whitened.iter().map(|x| -x).collect();
    let (kept_motion, idx) = sign_aware_select(basis, &motion, retain_whitened, tau)?;
    Ok((kept_motion.iter().map(|x| -x).collect(), idx))
}

/// Composes the practical GU gradient
/// `γ(g̃_f⊥ + g̃_f^{tan,keep}) + α g̃_r^{tan}`, de-whitened.
pub fn compose_gu_direction(
    bundle: &GradientBundle,
    basis: &RetainBasis,
    metric: &DiagonalMetric,
    cfg: &GuConfig,
) -> Result<StepReport> {
    check_dim(metric.dim(), basis.dim())?;
    check_dim(metric.dim(), bundle.dim())?;
    let f = &bundle.forget_whitened;
    let r = &bundle.retain_whitened;
    let normal = basis.project_normal(f)?;
    let normal_norm = norm(&normal);
    let entanglement_before = basis.entanglement(f)?;

    let (keep, kept_index_set, cap_applied) = if cfg.sign_aware {
        let (kept, idx) = gradient_keep(basis, f, r, cfg.tau)?;
        let (capped, applied) = cap_tangential(&kept, &normal, cfg.kappa);
        (capped, idx, applied)
    } else {
        (vec![0.0; basis.dim()], Vec::new(), false)
    };
    let retain_tan = basis.project_tangent(r)?;

    let mut whitened = vec![0.0; basis.dim()];
    axpy(cfg.gamma, &normal, &mut whitened);
    axpy(cfg.gamma, &keep, &mut whitened);
    axpy(cfg.alpha, &retain_tan, &mut whitened);
    let direction = metric.dewhiten(&whitened)?;

    Ok(StepReport {
        entanglement_before,
        tangential_keep_norm: norm(&keep),
        kept_index_set,
        normal_norm,
        cap_applied,
        predicted_retain_change: -cfg.rho * dot(&bundle.retain_grad, &direction),
        predicted_joint_change: -cfg.rho * dot(&bundle.total_grad, &direction),
        direction,
        degenerate: basis.is_empty(),
    })
}

/// The theory-form split step `Δθ = -ρ(P⊥ g_f + β P_T g_r)` over H-gradients.
pub fn split_step_direction(
    forget_h_grad: &[f64],
    retain_h_grad: &[f64],
    basis: &RetainBasis,
    metric: &DiagonalMetric,
    rho: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    check_dim(metric.dim(), basis.dim())?;
    let f = metric.whiten(forget_h_grad)?;
    let r = metric.whiten(retain_h_grad)?;
    let mut w = basis.project_normal(&f)?;
    axpy(beta, &basis.project_tangent(&r)?, &mut w);
    let step = metric.dewhiten(&w)?;
    Ok(linalg::scale(-rho, &step))
}

/// Theory-form split step with the sign-aware tangential keep added to the
/// forget part: `Δθ = -ρ(P⊥ g_f + Σ_K aᵢuᵢ + β P_T g_r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignAwareSplitStep {
    pub step: Vec<f64>,
    pub kept: Vec<usize>,
    /// `Σ_K |aᵢ||bᵢ|` over the kept columns (before capping).
    pub kept_abs_product: f64,
    pub cap_applied: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn sign_aware_split_step(
    forget_h_grad: &[f64],
    retain_h_grad: &[f64],
    basis: &RetainBasis,
    metric: &DiagonalMetric,
    rho: f64,
    beta: f64,
    tau: f64,
    kappa: Option<f64>,
) -> Result<SignAwareSplitStep> {
    check_dim(metric.dim(), basis.dim())?;
    let f = metric.whiten(forget_h_grad)?;
    let r = metric.whiten(retain_h_grad)?;
    let normal = basis.project_normal(&f)?;
    let (kept, idx) = gradient_keep(basis, &f, &r, tau)?;
    let kept_abs_product = idx
        .iter()
        .map(|&i| {
            let u = &basis.columns()[i];
            (dot(u, &f) * dot(u, &r)).abs()
        })
        .sum();
    let (kept, cap_applied) = match kappa {
        Some(k) => cap_tangential(&kept, &normal, k),
        None => (kept, false),
    };
    let mut w = normal;
    axpy(1.0, &kept, &mut w);
    axpy(beta, &basis.project_tangent(&r)?, &mut w);
    let step = linalg::scale(-rho, &metric.dewhiten(&w)?);
    Ok(SignAwareSplitStep { step, kept: idx, kept_abs_product, cap_applied })
}
