//! Unlearning episodes on synthetic tasks, the online theory audit, and
//! variant comparisons, with their CSV serializations.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{
    descent_stepsize_bound, finite_difference_directional, joint_descent_bound, nonpositivity_conditions,
    predicted_joint_change, ConditionFlags, FirstOrderReport,
};
use crate::config::{EpisodeConfig, MetricSource, ModelKind, OptimizerKind, RetainObjective, Variant};
use crate::error::{GuError, Result};
use crate::gu_step::{compose_gu_direction, split_step_direction, GradientBundle, GuConfig, StepReport};
use crate::linalg::{self, dot};
use crate::metric::DiagonalMetric;
use crate::models::{
    init_parameters, kl_retain_anchor, make_task, LinearNet, LossKind, Mlp, Negated, Network, Objective,
    QuadraticObjective, SupervisedObjective,
};
use crate::optimizer::{AdaptiveState, Optimizer};
use crate::subspace::RetainBasis;

/// Column header of the per-step episode CSV.
pub const EPISODE_CSV_HEADER: &str = "step,L_f,L_r,kl_anchor,entanglement,predicted_retain_change,\
actual_retain_change,predicted_joint_change,basis_rank,cap_applied,kept_count";

/// Column header of the comparison CSV.
pub const COMPARISON_CSV_HEADER: &str = "variant,delta_L_f,delta_L_r,mean_entanglement";

/// Column header of the audit CSV.
pub const AUDIT_CSV_HEADER: &str = "check,evaluated,violations,worst_error";

/// Seventeen significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// The objectives and starting point an episode runs on.
#[derive(Clone)]
pub struct Problem {
    /// Minimized forget objective (negative cross-entropy for classifiers).
    pub forget: Arc<dyn Objective>,
    /// Retain objective whose gradient is `g_r`.
    pub retain: Arc<dyn Objective>,
    /// Diagnostic anchor reported in the `kl_anchor` column.
    pub anchor: Arc<dyn Objective>,
    pub theta0: Vec<f64>,
    /// Reference parameters (retain optimum for quadratics, the pretrained model otherwise).
    pub reference: Vec<f64>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem").field("dim", &self.theta0.len()).finish_non_exhaustive()
    }
}

fn make_optimizer(cfg: &EpisodeConfig, dim: usize) -> Optimizer {
    match cfg.optimizer.kind {
        OptimizerKind::Sgd => Optimizer::Sgd { learning_rate: cfg.optimizer.learning_rate },
        OptimizerKind::Adam => {
            let mut s = AdaptiveState::new(dim, cfg.optimizer.learning_rate);
            s.beta1 = cfg.optimizer.beta1;
            s.beta2 = cfg.optimizer.beta2;
            s.epsilon = cfg.optimizer.epsilon;
            s.bias_corrected_metric = cfg.optimizer.bias_corrected_metric;
            Optimizer::Adaptive(s)
        }
    }
}

fn quadratic_problem(cfg: &EpisodeConfig) -> Result<Problem> {
    let p = cfg.task.dimension;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.task.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(rand_distr::StandardNormal) };
    let center_r: Vec<f64> = (0..p).map(|_| gauss(&mut rng)).collect();
    let curv_r: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..2.0)).collect();
    let offset: Vec<f64> = (0..p).map(|_| gauss(&mut rng)).collect();
    let center_f = linalg::add(&center_r, &offset);
    let curv_f: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..2.0)).collect();
    let theta0: Vec<f64> = center_r.iter().map(|c| c + 0.5 * gauss(&mut rng)).collect();
    let retain: Arc<dyn Objective> = Arc::new(QuadraticObjective::new(center_r.clone(), curv_r)?);
    Ok(Problem {
        forget: Arc::new(Negated(QuadraticObjective::new(center_f, curv_f)?)),
        anchor: retain.clone(),
        retain,
        theta0,
        reference: center_r,
    })
}

/// Fits the reference model on forget ∪ retain with Adam.
fn pretrain(net: Arc<dyn Network>, cfg: &EpisodeConfig, samples: Vec<crate::models::Sample>) -> Result<Vec<f64>> {
    let objective = SupervisedObjective::new(net.clone(), samples, LossKind::CrossEntropy)?;
    let mut theta = init_parameters(net.param_dim(), cfg.model.init_scale, cfg.task.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = AdaptiveState::new(theta.len(), cfg.model.pretrain_lr);
    for _ in 0..cfg.model.pretrain_steps {
        let g = objective.gradient(&theta)?;
        theta = state.step(&theta, &g)?;
    }
    crate::error::check_finite(&theta, "pretrained parameters")?;
    Ok(theta)
}

fn classifier_problem(cfg: &EpisodeConfig) -> Result<Problem> {
    let task =
        make_task(cfg.task.dimension, cfg.task.forget_count, cfg.task.retain_count, cfg.task.overlap, cfg.task.seed)?;
    let (net, classes): (Arc<dyn Network>, usize) = match cfg.model.kind {
        ModelKind::Logistic => (Arc::new(LinearNet { input_dim: cfg.task.dimension }), 1),
        ModelKind::Mlp => {
            let mut widths = vec![cfg.task.dimension];
            widths.extend(&cfg.model.hidden);
            widths.push(cfg.model.classes);
            (Arc::new(Mlp::new(widths, cfg.model.activation)?), cfg.model.classes)
        }
        ModelKind::Quadratic => unreachable!("handled by quadratic_problem"),
    };
    let forget_samples = task.forget_as_samples(classes);
    let retain_samples = task.retain_as_samples(classes);
    let mut all = forget_samples.clone();
    all.extend(retain_samples.iter().cloned());
    let reference = pretrain(net.clone(), cfg, all)?;

    let anchor: Arc<dyn Objective> = Arc::new(kl_retain_anchor(net.clone(), &reference, &retain_samples)?);
    let retain: Arc<dyn Objective> = match cfg.model.retain_objective {
        RetainObjective::Kl => anchor.clone(),
        RetainObjective::CrossEntropy => {
            Arc::new(SupervisedObjective::new(net.clone(), retain_samples, LossKind::CrossEntropy)?)
        }
    };
    let forget_ce = SupervisedObjective::new(net, forget_samples, LossKind::CrossEntropy)?;
    Ok(Problem { forget: Arc::new(Negated(forget_ce)), retain, anchor, theta0: reference.clone(), reference })
}

/// Builds the task, model and starting point for a config. Deterministic in the config.
pub fn build_problem(cfg: &EpisodeConfig) -> Result<Problem> {
    cfg.validate()?;
    match cfg.model.kind {
        ModelKind::Quadratic => quadratic_problem(cfg),
        ModelKind::Logistic | ModelKind::Mlp => classifier_problem(cfg),
    }
}

/// Theory-form step details kept for the audit.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryStep {
    pub theta_before: Vec<f64>,
    pub delta_theta: Vec<f64>,
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    pub first_order: FirstOrderReport,
    pub flags: ConditionFlags,
    /// `<g_f + α g_r, Δθ>` computed directly.
    pub direct_joint: f64,
    /// `‖g_r‖_H`
    pub retain_grad_norm_h: f64,
    /// `‖g_f + α g_r‖_H`
    pub joint_grad_norm_h: f64,
    /// `‖Δθ‖²_H`
    pub step_norm_sq_h: f64,
    pub lipschitz_retain: Option<f64>,
    pub lipschitz_forget: Option<f64>,
    /// `descent_stepsize_bound` at this step (when `L_r` is known).
    pub descent_bound: Option<f64>,
    pub joint_before: f64,
    pub joint_after: f64,
}

/// One row of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_forget: f64,
    pub loss_retain: f64,
    pub kl_anchor: f64,
    pub entanglement: f64,
    /// `g_rᵀΔθ` for the applied step.
    pub predicted_retain_change: f64,
    pub actual_retain_change: f64,
    /// First-order change of the stepped objective for the applied step.
    pub predicted_joint_change: f64,
    pub basis_rank: usize,
    pub cap_applied: bool,
    pub kept_count: usize,
    pub report: StepReport,
    pub theory: Option<TheoryStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeStatus {
    Completed,
    Failed { step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub initial_forget: f64,
    pub final_forget: f64,
    pub initial_retain: f64,
    pub final_retain: f64,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub delta_forget: f64,
    pub delta_retain: f64,
    /// Largest `|actual - predicted|` retain change over the steps.
    pub max_first_order_error: f64,
    pub mean_entanglement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub config: EpisodeConfig,
    pub steps: Vec<StepRecord>,
    pub loss_forget: Vec<f64>,
    pub loss_retain: Vec<f64>,
    pub kl_anchor: Vec<f64>,
    pub entanglement: Vec<f64>,
    pub rank_history: Vec<usize>,
    pub final_theta: Vec<f64>,
    pub status: EpisodeStatus,
    pub summary: EpisodeSummary,
}

impl EpisodeRecord {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn completed(&self) -> bool {
        self.status == EpisodeStatus::Completed
    }

    pub fn to_csv(&self) -> String {
        let status = match &self.status {
            EpisodeStatus::Completed => "completed".to_string(),
            EpisodeStatus::Failed { step, .. } => format!("failed@{step}"),
        };
        let mut s = format!(
            "# gu episode variant={} seed={} model={} steps={} status={}\n{}\n",
            self.config.variant,
            self.config.task.seed,
            self.config.model.kind,
            self.config.steps,
            status,
            EPISODE_CSV_HEADER
        );
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                fmt_f64(r.loss_forget),
                fmt_f64(r.loss_retain),
                fmt_f64(r.kl_anchor),
                fmt_f64(r.entanglement),
                fmt_f64(r.predicted_retain_change),
                fmt_f64(r.actual_retain_change),
                fmt_f64(r.predicted_joint_change),
                r.basis_rank,
                u8::from(r.cap_applied),
                r.kept_count
            );
        }
        s
    }
}

struct Evaluation {
    forget: f64,
    retain: f64,
    anchor: f64,
    forget_grad: Vec<f64>,
    retain_grad: Vec<f64>,
}

fn evaluate(problem: &Problem, theta: &[f64], same_anchor: bool) -> Result<Evaluation> {
    let (forget, forget_grad) = problem.forget.loss_and_gradient(theta)?;
    let (retain, retain_grad) = problem.retain.loss_and_gradient(theta)?;
    let anchor = if same_anchor { retain } else { problem.anchor.loss(theta)? };
    if !(forget.is_finite() && retain.is_finite() && anchor.is_finite()) {
        return Err(GuError::NonFinite("loss"));
    }
    crate::error::check_finite(&forget_grad, "forget gradient")?;
    crate::error::check_finite(&retain_grad, "retain gradient")?;
    Ok(Evaluation { forget, retain, anchor, forget_grad, retain_grad })
}

/// Most recent raw retain gradients, newest first.
struct Replay {
    grads: Vec<Vec<f64>>,
    cap: usize,
}

impl Replay {
    fn push(&mut self, g: &[f64]) {
        if g.iter().all(|x| *x == 0.0) {
            return;
        }
        self.grads.insert(0, g.to_vec());
        self.grads.truncate(self.cap);
    }

    /// Rebuilds `basis` from `first` followed by the stored gradients, all
    /// mapped through `to_whitened`.
    fn rebuild(
        &self,
        basis: &mut RetainBasis,
        first: &[f64],
        to_whitened: impl Fn(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<()> {
        basis.clear();
        basis.insert(&to_whitened(first)?)?;
        for g in &self.grads {
            basis.insert(&to_whitened(g)?)?;
        }
        Ok(())
    }
}

/// GU configuration actually used by a variant.
pub fn effective_gu_config(cfg: &EpisodeConfig) -> GuConfig {
    let mut gu = cfg.gu.clone();
    match cfg.variant {
        Variant::GuSignAware => gu.sign_aware = true,
        Variant::GuProjection | Variant::NoProjection => gu.sign_aware = false,
        Variant::SplitTheoryStep => {}
    }
    gu
}

struct Trajectory {
    rows: Vec<StepRecord>,
    max_fo_err: f64,
}

impl Trajectory {
    fn push(&mut self, row: StepRecord) {
        self.max_fo_err = self.max_fo_err.max((row.actual_retain_change - row.predicted_retain_change).abs());
        self.rows.push(row);
    }
}

#[allow(clippy::too_many_arguments)]
fn practical_step(
    cfg: &EpisodeConfig,
    gu: &GuConfig,
    problem: &Problem,
    theta: &mut Vec<f64>,
    t: usize,
    ev: &Evaluation,
    opt: &mut Optimizer,
    basis: &mut RetainBasis,
    replay: &mut Replay,
    same_anchor: bool,
) -> Result<(StepRecord, Evaluation)> {
    let dim = theta.len();
    let metric = opt.snapshot_metric(dim);
    let total = linalg::lincomb(gu.gamma, &ev.forget_grad, gu.alpha, &ev.retain_grad);
    if t.is_multiple_of(gu.refresh_period) {
        replay.rebuild(basis, &ev.retain_grad, |g| metric.whiten(g))?;
    } else {
        basis.insert(&metric.whiten(&ev.retain_grad)?)?;
    }
    replay.push(&ev.retain_grad);

    let bundle = GradientBundle::from_total(&total, &ev.retain_grad, gu, &metric)?;
    let report = if cfg.variant == Variant::NoProjection {
        bypass_report(&bundle, basis, gu)?
    } else {
        compose_gu_direction(&bundle, basis, &metric, gu)?
    };
    let next = opt.step(theta, &report.direction)?;
    crate::error::check_finite(&next, "parameters")?;
    let delta = linalg::sub(&next, theta);
    let after = evaluate(problem, &next, same_anchor)?;
    let row = StepRecord {
        step: t,
        loss_forget: ev.forget,
        loss_retain: ev.retain,
        kl_anchor: ev.anchor,
        entanglement: report.entanglement_before,
        predicted_retain_change: dot(&ev.retain_grad, &delta),
        actual_retain_change: after.retain - ev.retain,
        predicted_joint_change: dot(&total, &delta),
        basis_rank: basis.rank(),
        cap_applied: report.cap_applied,
        kept_count: report.kept_index_set.len(),
        report,
        theory: None,
    };
    *theta = next;
    Ok((row, after))
}

/// Baseline report: the direction is the unmodified `γ g_f + α g_r`.
fn bypass_report(bundle: &GradientBundle, basis: &RetainBasis, gu: &GuConfig) -> Result<StepReport> {
    let f = &bundle.forget_whitened;
    Ok(StepReport {
        entanglement_before: basis.entanglement(f)?,
        kept_index_set: Vec::new(),
        tangential_keep_norm: 0.0,
        normal_norm: linalg::norm(&basis.project_normal(f)?),
        cap_applied: false,
        predicted_retain_change: -gu.rho * dot(&bundle.retain_grad, &bundle.total_grad),
        predicted_joint_change: -gu.rho * dot(&bundle.total_grad, &bundle.total_grad),
        direction: bundle.total_grad.clone(),
        degenerate: true,
    })
}

#[allow(clippy::too_many_arguments)]
fn theory_step(
    cfg: &EpisodeConfig,
    gu: &GuConfig,
    problem: &Problem,
    theta: &mut Vec<f64>,
    t: usize,
    ev: &Evaluation,
    opt: &mut Optimizer,
    basis: &mut RetainBasis,
    replay: &mut Replay,
    same_anchor: bool,
) -> Result<(StepRecord, Evaluation)> {
    let dim = theta.len();
    let metric = match cfg.theory.metric {
        MetricSource::Optimizer => opt.snapshot_metric(dim),
        MetricSource::Identity => DiagonalMetric::identity(dim),
    };
    let f_h = metric.h_gradient(&ev.forget_grad)?;
    let r_h = metric.h_gradient(&ev.retain_grad)?;
    // The basis always starts from the current retain gradient so g_r lies in its span.
    replay.rebuild(basis, &r_h, |g| metric.whiten(g))?;
    replay.push(&r_h);

    let (alpha, beta) = (gu.alpha, gu.beta);
    let lipschitz_retain = problem.retain.lipschitz_h(&metric);
    let lipschitz_forget = problem.forget.lipschitz_h(&metric);
    let probe = predicted_joint_change(1.0, alpha, beta, &f_h, &r_h, basis, &metric)?;
    let descent_bound =
        lipschitz_retain.map(|l| descent_stepsize_bound(beta, probe.retain_energy, probe.perp_energy, l));
    let rho = match (cfg.theory.rho_bound_fraction, descent_bound) {
        (Some(_), None) => {
            return Err(GuError::Config(
                "theory.rho_bound_fraction needs a retain objective with a known Lipschitz constant".into(),
            ))
        }
        (Some(frac), Some(b)) if b > 0.0 => frac * b,
        _ => gu.rho,
    };
    let delta = split_step_direction(&f_h, &r_h, basis, &metric, rho, beta)?;
    let first_order = predicted_joint_change(rho, alpha, beta, &f_h, &r_h, basis, &metric)?;
    let flags = nonpositivity_conditions(alpha, beta, &first_order);
    let next = linalg::add(theta, &delta);
    crate::error::check_finite(&next, "parameters")?;
    let after = evaluate(problem, &next, same_anchor)?;
    opt.accumulate(&linalg::lincomb(1.0, &ev.forget_grad, alpha, &ev.retain_grad))?;

    let joint_grad = linalg::lincomb(1.0, &ev.forget_grad, alpha, &ev.retain_grad);
    let report = StepReport {
        entanglement_before: basis.entanglement(&metric.whiten(&f_h)?)?,
        kept_index_set: Vec::new(),
        tangential_keep_norm: 0.0,
        normal_norm: first_order.perp_energy.sqrt(),
        cap_applied: false,
        predicted_retain_change: first_order.predicted_retain_change,
        predicted_joint_change: first_order.predicted_joint_change,
        direction: delta.clone(),
        degenerate: basis.is_empty(),
    };
    let theory = TheoryStep {
        theta_before: theta.clone(),
        rho,
        alpha,
        beta,
        first_order,
        flags,
        direct_joint: dot(&joint_grad, &delta),
        retain_grad_norm_h: metric.norm(&r_h)?,
        joint_grad_norm_h: metric.norm(&linalg::lincomb(1.0, &f_h, alpha, &r_h))?,
        step_norm_sq_h: metric.norm_sq(&delta)?,
        lipschitz_retain,
        lipschitz_forget,
        descent_bound,
        joint_before: ev.forget + alpha * ev.retain,
        joint_after: after.forget + alpha * after.retain,
        delta_theta: delta,
    };
    let row = StepRecord {
        step: t,
        loss_forget: ev.forget,
        loss_retain: ev.retain,
        kl_anchor: ev.anchor,
        entanglement: report.entanglement_before,
        predicted_retain_change: first_order.predicted_retain_change,
        actual_retain_change: after.retain - ev.retain,
        predicted_joint_change: first_order.predicted_joint_change,
        basis_rank: basis.rank(),
        cap_applied: false,
        kept_count: 0,
        report,
        theory: Some(theory),
    };
    *theta = next;
    Ok((row, after))
}

/// Runs one episode on a prebuilt problem.
pub fn run_episode_on(cfg: &EpisodeConfig, problem: &Problem) -> Result<EpisodeRecord> {
    cfg.validate()?;
    let gu = effective_gu_config(cfg);
    let dim = problem.theta0.len();
    let same_anchor = Arc::ptr_eq(&problem.retain, &problem.anchor);
    let mut theta = problem.theta0.clone();
    let mut opt = make_optimizer(cfg, dim);
    let mut basis = RetainBasis::new(dim, gu.rank_cap, gu.residual_keep_thresh)?;
    let mut replay = Replay { grads: Vec::new(), cap: gu.rank_cap };
    let mut traj = Trajectory { rows: Vec::with_capacity(cfg.steps), max_fo_err: 0.0 };
    let mut status = EpisodeStatus::Completed;

    let initial = evaluate(problem, &theta, same_anchor)?;
    let (initial_forget, initial_retain, initial_kl) = (initial.forget, initial.retain, initial.anchor);
    let mut current = initial;
    for t in 0..cfg.steps {
        let outcome = if cfg.variant == Variant::SplitTheoryStep {
            theory_step(cfg, &gu, problem, &mut theta, t, &current, &mut opt, &mut basis, &mut replay, same_anchor)
        } else {
            practical_step(cfg, &gu, problem, &mut theta, t, &current, &mut opt, &mut basis, &mut replay, same_anchor)
        };
        match outcome {
            Ok((row, after)) => {
                traj.push(row);
                current = after;
            }
            Err(e @ GuError::Config(_)) => return Err(e),
            Err(e) => {
                status = EpisodeStatus::Failed { step: t, message: e.to_string() };
                break;
            }
        }
    }

    let rows = traj.rows;
    let entanglement: Vec<f64> = rows.iter().map(|r| r.entanglement).collect();
    let mean_entanglement =
        if entanglement.is_empty() { 0.0 } else { entanglement.iter().sum::<f64>() / entanglement.len() as f64 };
    let summary = EpisodeSummary {
        initial_forget,
        final_forget: current.forget,
        initial_retain,
        final_retain: current.retain,
        initial_kl,
        final_kl: current.anchor,
        delta_forget: current.forget - initial_forget,
        delta_retain: current.retain - initial_retain,
        max_first_order_error: traj.max_fo_err,
        mean_entanglement,
    };
    Ok(EpisodeRecord {
        config: cfg.clone(),
        loss_forget: rows.iter().map(|r| r.loss_forget).collect(),
        loss_retain: rows.iter().map(|r| r.loss_retain).collect(),
        kl_anchor: rows.iter().map(|r| r.kl_anchor).collect(),
        rank_history: rows.iter().map(|r| r.basis_rank).collect(),
        entanglement,
        steps: rows,
        final_theta: theta,
        status,
        summary,
    })
}

/// Builds the problem for `cfg` and runs one episode. A non-finite loss
/// ends the episode early with [`EpisodeStatus::Failed`].
pub fn run_episode(cfg: &EpisodeConfig) -> Result<EpisodeRecord> {
    let problem = build_problem(cfg)?;
    run_episode_on(cfg, &problem)
}

/// Audit tolerances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditTolerances {
    /// Central-difference step along `Δθ` (a fraction of the applied step).
    pub fd_step: f64,
    /// Relative tolerance for the finite-difference and joint-identity checks.
    pub relative: f64,
    /// Slack for the sign conditions, relative to the magnitude of the compared terms.
    pub sign_slack: f64,
}

impl Default for AuditTolerances {
    fn default() -> Self {
        Self { fd_step: 1e-3, relative: 1e-6, sign_slack: 1e-12 }
    }
}

impl AuditTolerances {
    pub fn from_config(cfg: &EpisodeConfig) -> Self {
        Self { fd_step: cfg.theory.fd_step, relative: cfg.theory.tolerance.max(1e-12), ..Self::default() }
    }
}

pub const AUDIT_CHECKS: [&str; 5] =
    ["first_order_retain", "retain_descent", "joint_identity", "joint_nonpositive", "joint_descent_bound"];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSummary {
    pub name: &'static str,
    pub evaluated: usize,
    pub violations: usize,
    pub worst_error: f64,
    /// Steps at which the check failed.
    pub failed_steps: Vec<usize>,
}

impl CheckSummary {
    fn new(name: &'static str) -> Self {
        Self { name, evaluated: 0, violations: 0, worst_error: 0.0, failed_steps: Vec::new() }
    }

    /// Records one evaluation; `excess` > 0 is a violation.
    fn record(&mut self, step: usize, error: f64, excess: f64) {
        self.evaluated += 1;
        self.worst_error = self.worst_error.max(error);
        if !(excess <= 0.0) {
            self.violations += 1;
            self.failed_steps.push(step);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub checks: Vec<CheckSummary>,
}

impl AuditReport {
    pub fn total_violations(&self) -> usize {
        self.checks.iter().map(|c| c.violations).sum()
    }

    pub fn passed(&self) -> bool {
        self.total_violations() == 0
    }

    pub fn check(&self, name: &str) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self, header_comment: &str) -> String {
        let mut s = format!("# {header_comment}\n{AUDIT_CSV_HEADER}\n");
        for c in &self.checks {
            let _ = writeln!(s, "{},{},{},{}", c.name, c.evaluated, c.violations, fmt_f64(c.worst_error));
        }
        s
    }
}

/// Checks a theory-variant record step by step:
///
/// - `first_order_retain`: recorded predicted retain change against a central difference of `retain` along `Δθ`
/// - `retain_descent`: with β > 0 and ρ below the descent bound, `L_r` strictly decreased; with β = 0, the
///   prediction is exactly zero and `|ΔL_r| ≤ (L/2)‖Δθ‖²_H`
/// - `joint_identity`: closed-form joint change against the direct inner product
/// - `joint_nonpositive`: whenever a sufficient condition holds, the predicted joint change is nonpositive
/// - `joint_descent_bound`: actual joint change below the smoothness bound (when both constants are known)
pub fn theory_audit(record: &EpisodeRecord, retain: &dyn Objective, tol: &AuditTolerances) -> Result<AuditReport> {
    if record.variant() != Variant::SplitTheoryStep {
        return Err(GuError::AuditUndefined(format!(
            "audit needs a {} record, got {}",
            Variant::SplitTheoryStep,
            record.variant()
        )));
    }
    let mut checks: Vec<CheckSummary> = AUDIT_CHECKS.iter().map(|n| CheckSummary::new(n)).collect();
    for row in &record.steps {
        let th = row
            .theory
            .as_ref()
            .ok_or_else(|| GuError::AuditUndefined(format!("step {} carries no theory data", row.step)))?;
        let t = row.step;
        let loss_scale = row.loss_retain.abs().max(1.0);
        let step_norm_h = th.step_norm_sq_h.sqrt();

        // (i)
        let fd = finite_difference_directional(retain, &th.theta_before, &th.delta_theta, tol.fd_step)?;
        let err = (fd - row.predicted_retain_change).abs();
        let allowed =
            tol.relative * th.retain_grad_norm_h * step_norm_h + 4.0 * f64::EPSILON * loss_scale / tol.fd_step;
        checks[0].record(t, err, err - allowed);

        // (ii)
        let roundoff = 4.0 * f64::EPSILON * loss_scale;
        if th.beta == 0.0 {
            let exact = if row.predicted_retain_change == 0.0 { 0.0 } else { 1.0 };
            match th.lipschitz_retain {
                Some(l) => {
                    let bound = 0.5 * l * th.step_norm_sq_h * (1.0 + 1e-9) + roundoff;
                    let a = row.actual_retain_change.abs();
                    checks[1].record(t, a, (a - bound).max(exact));
                }
                None => checks[1].record(t, row.predicted_retain_change.abs(), exact),
            }
        } else if let Some(b) = th.descent_bound {
            if b > 0.0 && th.rho < b {
                checks[1].record(t, row.actual_retain_change.max(0.0), row.actual_retain_change);
            }
        }

        // (iii)
        // Identity errors are relative to the Cauchy–Schwarz bound of the inner product.
        let fo = &th.first_order;
        let scale = th.joint_grad_norm_h * step_norm_h;
        let err = (fo.predicted_joint_change - th.direct_joint).abs();
        checks[2].record(t, err, err - tol.relative * scale.max(f64::MIN_POSITIVE));

        // (iv)
        if th.flags.any() {
            let v = fo.predicted_joint_change;
            checks[3].record(t, v.max(0.0), v - tol.sign_slack * scale.max(1.0));
        }

        // (v)
        if let (Some(lf), Some(lr)) = (th.lipschitz_forget, th.lipschitz_retain) {
            let bound = joint_descent_bound(th.alpha, fo, lf, lr, th.step_norm_sq_h);
            let actual = th.joint_after - th.joint_before;
            let slack = 4.0 * f64::EPSILON * th.joint_before.abs().max(1.0) + tol.relative * scale;
            checks[4].record(t, (actual - bound).max(0.0), actual - bound - slack);
        }
    }
    Ok(AuditReport { checks })
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub delta_forget: f64,
    pub delta_retain: f64,
    pub mean_entanglement: f64,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self, header_comment: &str) -> String {
        let mut s = format!("# {header_comment}\n{COMPARISON_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.variant,
                fmt_f64(r.delta_forget),
                fmt_f64(r.delta_retain),
                fmt_f64(r.mean_entanglement)
            );
        }
        s
    }

    pub fn row(&self, variant: Variant) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Runs every config (in parallel) and tabulates the summaries. All configs
/// must share one task seed.
pub fn compare_configs(configs: &[EpisodeConfig]) -> Result<ComparisonTable> {
    let seed =
        configs.first().ok_or_else(|| GuError::InvalidInput("comparison needs at least one variant".into()))?.task.seed;
    if let Some(c) = configs.iter().find(|c| c.task.seed != seed) {
        return Err(GuError::InvalidInput(format!(
            "comparison seeds differ: {seed} vs {} ({})",
            c.task.seed, c.variant
        )));
    }
    let records: Vec<Result<EpisodeRecord>> = configs.par_iter().map(run_episode).collect();
    let mut rows = Vec::with_capacity(configs.len());
    for r in records {
        let r = r?;
        rows.push(ComparisonRow {
            variant: r.variant(),
            delta_forget: r.summary.delta_forget,
            delta_retain: r.summary.delta_retain,
            mean_entanglement: r.summary.mean_entanglement,
            completed: r.completed(),
        });
    }
    Ok(ComparisonTable { seed, rows })
}

/// Runs `base` once per variant on the same task.
pub fn compare_variants(base: &EpisodeConfig, variants: &[Variant]) -> Result<ComparisonTable> {
    let configs: Vec<EpisodeConfig> = variants
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.variant = *v;
            c
        })
        .collect();
    compare_configs(&configs)
}
