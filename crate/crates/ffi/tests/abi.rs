use std::ffi::{CStr, CString};
use std::ptr;

use hyperpoint_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hp_last_error()) }.to_string_lossy().into_owned()
}

fn grid_points(n: usize) -> Vec<f64> {
    (0..n).flat_map(|i| [i as f64, (i * i % 7) as f64 * 0.1, 0.0]).collect()
}

#[test]
fn fps_picks_the_far_end_of_a_line() {
    let xyz: Vec<f64> = (0..4).flat_map(|i| [i as f64, 0.0, 0.0]).collect();
    let mut out = [usize::MAX; 2];
    let s = unsafe { hp_fps(xyz.as_ptr(), 4, 2, 0, out.as_mut_ptr()) };
    assert_eq!(s, HpStatus::Ok);
    assert_eq!(out, [0, 3]);
    assert_eq!(last_error(), "");
}

#[test]
fn knn_and_ball_group_fill_rows() {
    let xyz = grid_points(10);
    let q = [0.0, 0.0, 0.0, 9.0, 0.0, 0.0];
    let mut nn = [0usize; 6];
    assert_eq!(unsafe { hp_knn(xyz.as_ptr(), 10, q.as_ptr(), 2, 3, nn.as_mut_ptr()) }, HpStatus::Ok);
    assert_eq!(nn[0], 0);
    assert_eq!(nn[3], 9);
    let mut ball = [0usize; 6];
    assert_eq!(unsafe { hp_ball_group(xyz.as_ptr(), 10, q.as_ptr(), 2, 0.5, 3, ball.as_mut_ptr()) }, HpStatus::Ok);
    // only the point itself lies inside the ball, so rows repeat it
    assert_eq!(ball, [0, 0, 0, 9, 9, 9]);
}

#[test]
fn bspline_basis_sums_to_one() {
    let mut b = [0.0; 8];
    assert_eq!(unsafe { hp_bspline_basis(0.3, -1.0, 1.0, 5, 3, b.as_mut_ptr(), b.len()) }, HpStatus::Ok);
    assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let s = unsafe { hp_bspline_basis(0.3, -1.0, 1.0, 5, 3, b.as_mut_ptr(), 7) };
    assert_eq!(s, HpStatus::InvalidArgument);
    assert!(last_error().contains("basis"));
}

#[test]
fn null_pointers_and_contract_errors_are_reported() {
    let mut out = [0usize; 1];
    assert_eq!(unsafe { hp_fps(ptr::null(), 3, 1, 0, out.as_mut_ptr()) }, HpStatus::NullPointer);
    assert!(last_error().contains("xyz"));
    let xyz = grid_points(3);
    assert_eq!(unsafe { hp_fps(xyz.as_ptr(), 3, 1, 0, ptr::null_mut()) }, HpStatus::NullPointer);
    let mut many = [0usize; 5];
    assert_eq!(unsafe { hp_fps(xyz.as_ptr(), 3, 5, 0, many.as_mut_ptr()) }, HpStatus::Contract);
    assert!(!last_error().is_empty());
}

#[test]
fn model_lifecycle_and_forward() {
    let toml = CString::new("version = 1\n[model]\nframes = 4\npoints = 32\n[synth]\nframes = 4\npoints = 32\n").unwrap();
    let mut model: *mut HpModel = ptr::null_mut();
    let s = unsafe { hp_model_from_config(toml.as_ptr(), 3, &mut model) };
    assert_eq!(s, HpStatus::Ok, "{}", last_error());
    assert!(!model.is_null());

    let (mut frames, mut points, mut classes) = (0usize, 0usize, 0usize);
    assert_eq!(unsafe { hp_model_shape(model, &mut frames, &mut points, &mut classes) }, HpStatus::Ok);
    assert_eq!((frames, points), (4, 32));

    let xyz: Vec<f64> = (0..frames * points * 3).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let mut a = vec![0.0; classes];
    let mut b = vec![0.0; classes];
    assert_eq!(unsafe { hp_model_forward(model, xyz.as_ptr(), frames, points, a.as_mut_ptr(), classes) }, HpStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { hp_model_forward(model, xyz.as_ptr(), frames, points, b.as_mut_ptr(), classes) }, HpStatus::Ok);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));

    assert_eq!(unsafe { hp_model_forward(model, xyz.as_ptr(), frames, points, a.as_mut_ptr(), classes + 1) }, HpStatus::InvalidArgument);
    unsafe { hp_model_free(model) };
    unsafe { hp_model_free(ptr::null_mut()) };
}

#[test]
fn bad_config_is_a_config_error() {
    let toml = CString::new("version = 99\n").unwrap();
    let mut model: *mut HpModel = ptr::null_mut();
    assert_eq!(unsafe { hp_model_from_config(toml.as_ptr(), 0, &mut model) }, HpStatus::Config);
    assert!(model.is_null());
}

#[test]
fn loading_missing_files_is_an_io_error() {
    let cfg = CString::new("/nonexistent/config.toml").unwrap();
    let ckpt = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model: *mut HpModel = ptr::null_mut();
    assert_eq!(unsafe { hp_model_load(cfg.as_ptr(), ckpt.as_ptr(), &mut model) }, HpStatus::Io);
}

#[test]
fn header_declares_every_entry_point() {
    let header = include_str!("../include/hyperpoint.h");
    for sym in [
        "hp_last_error",
        "hp_fps",
        "hp_knn",
        "hp_ball_group",
        "hp_bspline_basis",
        "hp_model_new_default",
        "hp_model_from_config",
        "hp_model_load",
        "hp_model_shape",
        "hp_model_forward",
        "hp_model_free",
        "HP_STATUS_OK",
        "typedef struct HpModel HpModel",
    ] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
}
