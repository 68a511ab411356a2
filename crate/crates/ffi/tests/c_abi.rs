use std::ffi::{c_char, CStr, CString};
use std::ptr;

use gu_core::metric::DiagonalMetric;
use gu_core::subspace::RetainBasis;
use gu_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { gu_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn metric(v: &[f64]) -> *mut GuMetric {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { gu_metric_new(v.as_ptr(), v.len(), 1e-8, &mut m) }, GuStatus::Ok);
    m
}

fn basis(dim: usize) -> *mut GuBasis {
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { gu_basis_new(dim, 4, 0.0, &mut b) }, GuStatus::Ok);
    b
}

const V: [f64; 4] = [1e-2, 0.5, 2.0, 1e-4];

#[test]
fn metric_matches_core() {
    let m = metric(&V);
    let core = DiagonalMetric::from_second_moments(&V, 1e-8).unwrap();
    let g = [1.0, -2.0, 0.5, 3.0];
    let mut out = [0.0; 4];
    unsafe {
        assert_eq!(gu_metric_dim(m), 4);
        assert_eq!(gu_metric_h_gradient(m, g.as_ptr(), 4, out.as_mut_ptr()), GuStatus::Ok);
        assert_eq!(out.to_vec(), core.h_gradient(&g).unwrap());
        assert_eq!(gu_metric_whiten(m, g.as_ptr(), 4, out.as_mut_ptr()), GuStatus::Ok);
        assert_eq!(out.to_vec(), core.whiten(&g).unwrap());
        gu_metric_free(m);
    }
}

#[test]
fn split_step_matches_core() {
    let m = metric(&V);
    let b = basis(4);
    let core_m = DiagonalMetric::from_second_moments(&V, 1e-8).unwrap();
    let mut core_b = RetainBasis::new(4, 4, 0.0).unwrap();
    let r = [0.3, 1.0, -0.2, 0.7];
    let f = [-1.0, 0.4, 2.0, 0.1];
    let rw = core_m.whiten(&r).unwrap();
    let mut inserted = false;
    let mut step = [0.0; 4];
    unsafe {
        assert_eq!(gu_basis_insert(b, rw.as_ptr(), 4, &mut inserted), GuStatus::Ok);
        assert!(inserted);
        assert_eq!(gu_basis_rank(b), 1);
        assert_eq!(gu_split_step(b, m, f.as_ptr(), r.as_ptr(), 4, 0.1, 0.5, step.as_mut_ptr()), GuStatus::Ok);
    }
    core_b.insert(&rw).unwrap();
    let expected = gu_core::gu_step::split_step_direction(&f, &r, &core_b, &core_m, 0.1, 0.5).unwrap();
    assert_eq!(step.to_vec(), expected);
    // β = 0 leaves the retain direction untouched to first order.
    unsafe {
        assert_eq!(gu_split_step(b, m, f.as_ptr(), r.as_ptr(), 4, 0.1, 0.0, step.as_mut_ptr()), GuStatus::Ok);
    }
    assert!(core_m.inner(&r, &step).unwrap().abs() < 1e-12);
    unsafe {
        assert_eq!(gu_basis_clear(b), GuStatus::Ok);
        assert_eq!(gu_basis_rank(b), 0);
        gu_basis_free(b);
        gu_metric_free(m);
    }
}

#[test]
fn compose_step_reports() {
    let m = metric(&V);
    let b = basis(4);
    let total = [1.0, -0.5, 0.2, 0.9];
    let retain = [0.4, 0.1, -0.3, 0.2];
    let params = GuStepParams { gamma: 1.0, alpha: 1.0, kappa: 0.5, tau: 0.0, rho: 0.01, sign_aware: true };
    let mut dir = [0.0; 4];
    let mut summary = GuStepSummary::default();
    unsafe {
        assert_eq!(
            gu_compose_step(b, m, total.as_ptr(), retain.as_ptr(), 4, params, dir.as_mut_ptr(), &mut summary),
            GuStatus::Ok
        );
    }
    // With an empty basis every forget direction is feasible and no retain tangent exists.
    assert!(summary.degenerate);
    for ((d, t), r) in dir.iter().zip(&total).zip(&retain) {
        assert!((d - (t - r)).abs() < 1e-12);
    }
    let bad = GuStepParams { kappa: 2.0, ..params };
    let status =
        unsafe { gu_compose_step(b, m, total.as_ptr(), retain.as_ptr(), 4, bad, dir.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, GuStatus::InvalidInput);
    assert!(last_error().contains("kappa"));
    unsafe {
        gu_basis_free(b);
        gu_metric_free(m);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    let bad = [1.0, -1.0];
    unsafe {
        assert_eq!(gu_metric_new(ptr::null(), 3, 1e-8, &mut m), GuStatus::NullPointer);
        assert!(last_error().contains("v_hat"));
        assert_eq!(gu_metric_new(bad.as_ptr(), 2, 1e-8, ptr::null_mut()), GuStatus::NullPointer);
        assert_ne!(gu_metric_new(bad.as_ptr(), 2, 1e-8, &mut m), GuStatus::Ok);
        assert!(m.is_null());
    }
    let m = metric(&V);
    let b = basis(3);
    let v = [1.0; 4];
    let mut out = [0.0; 4];
    unsafe {
        assert_eq!(
            gu_split_step(b, m, v.as_ptr(), v.as_ptr(), 4, 0.1, 1.0, out.as_mut_ptr()),
            GuStatus::DimensionMismatch
        );
        let nan = [f64::NAN; 3];
        assert_eq!(gu_basis_insert(b, nan.as_ptr(), 3, ptr::null_mut()), GuStatus::NonFinite);
        assert_eq!(
            gu_split_step(ptr::null(), m, v.as_ptr(), v.as_ptr(), 4, 0.1, 1.0, out.as_mut_ptr()),
            GuStatus::NullPointer
        );
        assert_eq!(gu_metric_dim(ptr::null()), 0);
        gu_metric_free(ptr::null_mut());
        gu_basis_free(b);
        gu_metric_free(m);
    }
}

#[test]
fn error_buffer_truncates() {
    unsafe {
        assert_eq!(gu_basis_new(4, 0, 0.0, &mut ptr::null_mut()), GuStatus::InvalidInput);
        let mut small = [1 as c_char; 4];
        let full = gu_last_error(small.as_mut_ptr(), small.len());
        assert!(full > 3);
        assert_eq!(small[3], 0);
        assert_eq!(gu_last_error(ptr::null_mut(), 0), full);
    }
}

#[test]
fn episode_csv_round_trip() {
    let text = CString::new("model.kind=quadratic\ntask.dimension=6\nepisode.steps=5\n").unwrap();
    let mut csv = ptr::null_mut();
    unsafe {
        assert_eq!(gu_run_episode_csv(text.as_ptr(), &mut csv), GuStatus::Ok);
        let s = CStr::from_ptr(csv).to_str().unwrap().to_owned();
        gu_string_free(csv);
        assert_eq!(s.lines().count(), 5 + 2);
        assert!(s.starts_with("# gu episode"));
    }
    let bad = CString::new("episode.steps=banana\n").unwrap();
    let mut csv = ptr::null_mut();
    unsafe {
        assert_eq!(gu_run_episode_csv(bad.as_ptr(), &mut csv), GuStatus::Config);
        assert!(csv.is_null());
        assert_eq!(gu_run_episode_csv(ptr::null(), &mut csv), GuStatus::NullPointer);
    }
}
