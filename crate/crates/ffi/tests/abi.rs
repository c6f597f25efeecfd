use std::ffi::CStr;
use std::ptr;

use lissa_ffi::*;

fn last_error() -> String {
    let p = lissa_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn recommend_matches_published_resnet18_inputs() {
    let mut hp = LissaHyperParams::default();
    let s = unsafe { lissa_recommend(1.32e-3, 11_000_000, 270.0, 5.0, 2.0, 2.0, &mut hp) };
    assert_eq!(s, LissaStatus::Ok);
    assert!((hp.eta - 1.0 / 275.0).abs() < 1e-15);
    assert_eq!(hp.batch_size, 108);
    assert!(hp.has_t_steps);
    assert_eq!(hp.t_steps, 110);
}

#[test]
fn zero_damping_has_no_step_count() {
    let mut hp = LissaHyperParams::default();
    let s = unsafe { lissa_recommend(1e-3, 100, 2.0, 0.0, 2.0, 2.0, &mut hp) };
    assert_eq!(s, LissaStatus::Ok);
    assert!(!hp.has_t_steps);
}

#[test]
fn null_out_pointer_is_reported() {
    let s = unsafe { lissa_recommend(1e-3, 100, 2.0, 0.1, 2.0, 2.0, ptr::null_mut()) };
    assert_eq!(s, LissaStatus::NullPointer);
    assert!(last_error().contains("null"));
}

#[test]
fn invalid_inputs_set_message() {
    let mut hp = LissaHyperParams::default();
    let s = unsafe { lissa_recommend(1e-3, 100, -2.0, 0.1, 2.0, 2.0, &mut hp) };
    assert_eq!(s, LissaStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn dense_operator_solve_matches_exact() {
    let h = [2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.5];
    let g = [1.0, -1.0, 0.5];
    let mut op = ptr::null_mut();
    unsafe {
        assert_eq!(lissa_operator_dense(h.as_ptr(), 3, &mut op), LissaStatus::Ok);
        assert_eq!(lissa_operator_dim(op), 3);
        let mut exact = [0.0; 3];
        assert_eq!(lissa_exact_ihvp(h.as_ptr(), 3, 0.1, g.as_ptr(), exact.as_mut_ptr()), LissaStatus::Ok);
        let mut u = [0.0; 3];
        let eta = 1.0 / 2.7;
        assert_eq!(lissa_solve(op, g.as_ptr(), 3, eta, 0.1, 2000, 1, u.as_mut_ptr()), LissaStatus::Ok);
        for i in 0..3 {
            assert!((u[i] - exact[i]).abs() < 1e-10, "{u:?} vs {exact:?}");
        }
        // (H + λ) u = g
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| h[i * 3 + j] * exact[j]).sum::<f64>() + 0.1 * exact[i];
            assert!((r - g[i]).abs() < 1e-12);
        }
        let mut mean = 0.0;
        let mut se = 0.0;
        assert_eq!(lissa_estimate_trace(op, 4000, 3, &mut mean, &mut se), LissaStatus::Ok);
        assert!(se > 0.0 && (mean - 3.5 / 3.0).abs() < 4.0 * se, "{mean} ± {se}");
        lissa_operator_free(op);
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    let h = [1.0, 0.0, 0.0, 1.0];
    let g = [1.0, 1.0, 1.0];
    let mut op = ptr::null_mut();
    unsafe {
        assert_eq!(lissa_operator_dense(h.as_ptr(), 2, &mut op), LissaStatus::Ok);
        let mut u = [0.0; 3];
        let s = lissa_solve(op, g.as_ptr(), 3, 0.5, 0.1, 10, 0, u.as_mut_ptr());
        assert_eq!(s, LissaStatus::DimensionMismatch);
        lissa_operator_free(op);
    }
}

#[test]
fn gnh_operator_over_dataset() {
    let x: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let layers = [2usize, 2];
    let theta = [0.1, -0.2, 0.3, 0.05, 0.0, 0.0];
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(lissa_dataset_new(x.as_ptr(), y.as_ptr(), 20, 2, 2, &mut ds), LissaStatus::Ok);
        let mut op = ptr::null_mut();
        let s = lissa_operator_gnh(layers.as_ptr(), 2, 0, theta.as_ptr(), 6, ds, 0, 0.0, &mut op);
        assert_eq!(s, LissaStatus::Ok, "{}", last_error());
        // the dataset handle may go first; the operator keeps its own reference
        lissa_dataset_free(ds);
        let n = lissa_operator_dim(op);
        assert_eq!(n, 6);
        let mut lmax = 0.0;
        assert_eq!(lissa_top_eigenvalue(op, 6, 1, &mut lmax), LissaStatus::Ok);
        assert!(lmax > 0.0);
        let u = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut a = [0.0; 6];
        let mut b = [0.0; 6];
        assert_eq!(lissa_operator_apply(op, u.as_ptr(), 6, 1, a.as_mut_ptr()), LissaStatus::Ok);
        assert_eq!(lissa_operator_apply(op, u.as_ptr(), 6, 2, b.as_mut_ptr()), LissaStatus::Ok);
        assert_eq!(a, b);
        lissa_operator_free(op);
    }
}

#[test]
fn free_functions_accept_null() {
    unsafe {
        lissa_operator_free(ptr::null_mut());
        lissa_dataset_free(ptr::null_mut());
        assert_eq!(lissa_operator_dim(ptr::null()), 0);
    }
    let v = unsafe { CStr::from_ptr(lissa_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
