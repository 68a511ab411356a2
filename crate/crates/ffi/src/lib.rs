//! C ABI over `gu-core`.
//!
//! Objects cross the boundary as opaque handles (`GuMetric`, `GuBasis`)
//! created by `*_new` functions and released with the matching `*_free`.
//! Every fallible call returns a [`GuStatus`]; on failure a message is
//! stored per thread and can be read with [`gu_last_error`]. Panics never
//! unwind into C and are reported as `GU_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gu_core::config::EpisodeConfig;
use gu_core::gu_step::{compose_gu_direction, split_step_direction, GradientBundle, GuConfig};
use gu_core::harness::run_episode;
use gu_core::{DiagonalMetric, GuError, RetainBasis};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuStatus {
    Ok = 0,
    NullPointer = 1,
    DimensionMismatch = 2,
    InvalidInput = 3,
    NonFinite = 4,
    Config = 5,
    Io = 6,
    Internal = 7,
}

/// Diagonal metric handle.
pub struct GuMetric(DiagonalMetric);

/// Retain basis handle.
pub struct GuBasis(RetainBasis);

/// Parameters of one practical GU step.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GuStepParams {
    pub gamma: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub tau: f64,
    pub rho: f64,
    pub sign_aware: bool,
}

/// Diagnostics of one practical GU step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GuStepSummary {
    pub entanglement: f64,
    pub normal_norm: f64,
    pub tangential_keep_norm: f64,
    pub predicted_retain_change: f64,
    pub predicted_joint_change: f64,
    pub kept_count: usize,
    pub cap_applied: bool,
    pub degenerate: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &GuError) -> GuStatus {
    match err {
        GuError::DimensionMismatch { .. } => GuStatus::DimensionMismatch,
        GuError::NonFinite(_) => GuStatus::NonFinite,
        GuError::InvalidInput(_) | GuError::EmptyBasis | GuError::AuditUndefined(_) => GuStatus::InvalidInput,
        GuError::Config(_) => GuStatus::Config,
        GuError::Io(_) => GuStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(GuError),
}

impl From<GuError> for Fail {
    fn from(e: GuError) -> Self {
        Fail::Core(e)
    }
}

type FfiResult = Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> GuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GuStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GuStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            GuStatus::Internal
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

fn write_out(out: &mut [f64], v: &[f64]) -> FfiResult {
    if out.len() != v.len() {
        return Err(GuError::DimensionMismatch { expected: v.len(), found: out.len() }.into());
    }
    out.copy_from_slice(v);
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`) and returns the full message length excluding the NUL.
/// Returns 0 when no error has been recorded.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gu_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && cap > 0 {
                let n = bytes.len().min(cap - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Metric `H = diag(1/(v̂+ε))` from Adam second moments.
///
/// # Safety
/// `v_hat` must point to `dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gu_metric_new(
    v_hat: *const f64,
    dim: usize,
    epsilon: f64,
    out: *mut *mut GuMetric,
) -> GuStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let v = slice(v_hat, dim, "v_hat")?;
        let m = DiagonalMetric::from_second_moments(v, epsilon)?;
        *out = Box::into_raw(Box::new(GuMetric(m)));
        Ok(())
    })
}

/// # Safety
/// `metric` must be null or a handle from [`gu_metric_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gu_metric_free(metric: *mut GuMetric) {
    if !metric.is_null() {
        drop(Box::from_raw(metric));
    }
}

/// Dimension of the metric, 0 for a null handle.
///
/// # Safety
/// `metric` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gu_metric_dim(metric: *const GuMetric) -> usize {
    metric.as_ref().map_or(0, |m| m.0.dim())
}

/// `out = H⁻¹ g`
///
/// # Safety
/// `grad` and `out` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gu_metric_h_gradient(
    metric: *const GuMetric,
    grad: *const f64,
    len: usize,
    out: *mut f64,
) -> GuStatus {
    guard(|| {
        let m = handle(metric, "metric")?;
        let g = slice(grad, len, "grad")?;
        let o = slice_mut(out, len, "out")?;
        write_out(o, &m.0.h_gradient(g)?)
    })
}

/// `out = W v`, the whitened coordinates used by the basis.
///
/// # Safety
/// `v` and `out` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gu_metric_whiten(
    metric: *const GuMetric,
    v: *const f64,
    len: usize,
    out: *mut f64,
) -> GuStatus {
    guard(|| {
        let m = handle(metric, "metric")?;
        let o = slice_mut(out, len, "out")?;
        write_out(o, &m.0.whiten(slice(v, len, "v")?)?)
    })
}

/// Empty retain basis.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gu_basis_new(
    dim: usize,
    rank_cap: usize,
    residual_keep_thresh: f64,
    out: *mut *mut GuBasis,
) -> GuStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let b = RetainBasis::new(dim, rank_cap, residual_keep_thresh)?;
        *out = Box::into_raw(Box::new(GuBasis(b)));
        Ok(())
    })
}

/// # Safety
/// `basis` must be null or a handle from [`gu_basis_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gu_basis_free(basis: *mut GuBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// Current rank, 0 for a null handle.
///
/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gu_basis_rank(basis: *const GuBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.0.rank())
}

/// Drops every column.
///
/// # Safety
/// `basis` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gu_basis_clear(basis: *mut GuBasis) -> GuStatus {
    guard(|| {
        basis.as_mut().ok_or(Fail::Null("basis"))?.0.clear();
        Ok(())
    })
}

/// Inserts a whitened retain gradient; `inserted` (optional) reports whether it added a column.
///
/// # Safety
/// `v` must point to `len` doubles; `inserted` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn gu_basis_insert(
    basis: *mut GuBasis,
    v: *const f64,
    len: usize,
    inserted: *mut bool,
) -> GuStatus {
    guard(|| {
        let b = basis.as_mut().ok_or(Fail::Null("basis"))?;
        let ins = b.0.insert(slice(v, len, "v")?)?;
        if let Some(flag) = inserted.as_mut() {
            *flag = ins.inserted;
        }
        Ok(())
    })
}

/// Practical GU step. Writes the raw-coordinate direction handed to the
/// optimizer into `out_direction` and, when `summary` is non-null, its diagnostics.
///
/// # Safety
/// `total_grad`, `retain_grad` and `out_direction` must each point to `len`
/// doubles; `summary` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn gu_compose_step(
    basis: *const GuBasis,
    metric: *const GuMetric,
    total_grad: *const f64,
    retain_grad: *const f64,
    len: usize,
    params: GuStepParams,
    out_direction: *mut f64,
    summary: *mut GuStepSummary,
) -> GuStatus {
    guard(|| {
        let b = handle(basis, "basis")?;
        let m = handle(metric, "metric")?;
        let cfg = GuConfig {
            gamma: params.gamma,
            alpha: params.alpha,
            kappa: params.kappa,
            tau: params.tau,
            rho: params.rho,
            sign_aware: params.sign_aware,
            ..GuConfig::default()
        };
        cfg.validate()?;
        let bundle = GradientBundle::from_total(
            slice(total_grad, len, "total_grad")?,
            slice(retain_grad, len, "retain_grad")?,
            &cfg,
            &m.0,
        )?;
        let report = compose_gu_direction(&bundle, &b.0, &m.0, &cfg)?;
        write_out(slice_mut(out_direction, len, "out_direction")?, &report.direction)?;
        if let Some(s) = summary.as_mut() {
            *s = GuStepSummary {
                entanglement: report.entanglement_before,
                normal_norm: report.normal_norm,
                tangential_keep_norm: report.tangential_keep_norm,
                predicted_retain_change: report.predicted_retain_change,
                predicted_joint_change: report.predicted_joint_change,
                kept_count: report.kept_index_set.len(),
                cap_applied: report.cap_applied,
                degenerate: report.degenerate,
            };
        }
        Ok(())
    })
}

/// Theory-form step `Δθ = -ρ(P⊥ f + β P_T r)` over H-gradients.
///
/// # Safety
/// `forget_h_grad`, `retain_h_grad` and `out_step` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gu_split_step(
    basis: *const GuBasis,
    metric: *const GuMetric,
    forget_h_grad: *const f64,
    retain_h_grad: *const f64,
    len: usize,
    rho: f64,
    beta: f64,
    out_step: *mut f64,
) -> GuStatus {
    guard(|| {
        let b = handle(basis, "basis")?;
        let m = handle(metric, "metric")?;
        let step = split_step_direction(
            slice(forget_h_grad, len, "forget_h_grad")?,
            slice(retain_h_grad, len, "retain_h_grad")?,
            &b.0,
            &m.0,
            rho,
            beta,
        )?;
        write_out(slice_mut(out_step, len, "out_step")?, &step)
    })
}

/// Runs one episode from key=value config text and returns its per-step CSV
/// in `out_csv`, to be released with [`gu_string_free`]. A failed episode
/// still returns `GU_STATUS_OK`; its status is recorded in the CSV comment line.
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out_csv` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gu_run_episode_csv(config_text: *const c_char, out_csv: *mut *mut c_char) -> GuStatus {
    guard(|| {
        let out = out_csv.as_mut().ok_or(Fail::Null("out_csv"))?;
        if config_text.is_null() {
            return Err(Fail::Null("config_text"));
        }
        let text =
            CStr::from_ptr(config_text).to_str().map_err(|e| GuError::Config(format!("config is not UTF-8: {e}")))?;
        let cfg = EpisodeConfig::from_text(text)?;
        let csv = run_episode(&cfg)?.to_csv();
        *out = CString::new(csv).map_err(|e| GuError::InvalidInput(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gu_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
