//! C ABI for the hyperpoint library.
//!
//! All functions return an [`HpStatus`]. On failure a message is kept per
//! thread and can be read with [`hp_last_error`]. Models are opaque handles
//! created by `hp_model_*` constructors and released with [`hp_model_free`].
//! Point arrays are row-major `x, y, z` triples of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hyperpoint::checkpoint::load_checkpoint;
use hyperpoint::config::RunConfig;
use hyperpoint::data::PointCloudSequence;
use hyperpoint::geometry::{ball_group, farthest_point_sample, knn_query, Point3, PointCloudFrame};
use hyperpoint::kan::{bspline_basis, SplineGrid};
use hyperpoint::model::{Model, ModelConfig};
use hyperpoint::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Shape = 4,
    Numeric = 5,
    Format = 6,
    Config = 7,
    Io = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct HpModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> HpStatus {
    match e {
        Error::Shape { .. } => HpStatus::Shape,
        Error::Contract(_) => HpStatus::Contract,
        Error::Numeric { .. } => HpStatus::Numeric,
        Error::Internal(_) => HpStatus::Internal,
        Error::Format { .. } => HpStatus::Format,
        Error::Config(_) => HpStatus::Config,
        Error::Io { .. } => HpStatus::Io,
    }
}

enum Failure {
    Status(HpStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(HpStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure::Status(HpStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HpStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside hyperpoint");
            HpStatus::Panic
        }
    }
}

unsafe fn points<'a>(ptr: *const f64, n: usize, what: &str) -> Result<Vec<Point3>, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let flat = std::slice::from_raw_parts(ptr, n.checked_mul(3).ok_or_else(|| invalid("point count overflows"))?);
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Farthest point sampling of `k` indices from `n` points, starting at `start`.
///
/// # Safety
/// `xyz` must hold `3 * n` doubles and `out` room for `k` indices.
#[no_mangle]
pub unsafe extern "C" fn hp_fps(xyz: *const f64, n: usize, k: usize, start: usize, out: *mut usize) -> HpStatus {
    guard(|| {
        let pts = points(xyz, n, "xyz")?;
        let idx = farthest_point_sample(&pts, k, start)?;
        out_slice(out, k, "out")?.copy_from_slice(&idx);
        Ok(())
    })
}

/// The `k` nearest of `n` points for each of `m` queries, row-major `m × k`.
///
/// # Safety
/// `xyz` must hold `3 * n` doubles, `queries` `3 * m` doubles and `out`
/// room for `m * k` indices.
#[no_mangle]
pub unsafe extern "C" fn hp_knn(xyz: *const f64, n: usize, queries: *const f64, m: usize, k: usize, out: *mut usize) -> HpStatus {
    guard(|| {
        let pts = points(xyz, n, "xyz")?;
        let q = points(queries, m, "queries")?;
        let idx = knn_query(&pts, &q, k)?;
        out_slice(out, m * k, "out")?.copy_from_slice(&idx);
        Ok(())
    })
}

/// Up to `k` points within `radius` of each of `m` centres, nearest first;
/// short rows repeat their nearest point. Output is row-major `m × k`.
///
/// # Safety
/// As for [`hp_knn`].
#[no_mangle]
pub unsafe extern "C" fn hp_ball_group(
    xyz: *const f64,
    n: usize,
    centres: *const f64,
    m: usize,
    radius: f64,
    k: usize,
    out: *mut usize,
) -> HpStatus {
    guard(|| {
        let pts = points(xyz, n, "xyz")?;
        let c = points(centres, m, "centres")?;
        let idx = ball_group(&pts, &c, radius, k)?;
        out_slice(out, m * k, "out")?.copy_from_slice(&idx.neighbors);
        Ok(())
    })
}

/// All `intervals + degree` B-spline basis values at `x` on a uniform grid
/// over `[min, max]`.
///
/// # Safety
/// `out` must have room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hp_bspline_basis(x: f64, min: f64, max: f64, intervals: usize, degree: usize, out: *mut f64, out_len: usize) -> HpStatus {
    guard(|| {
        let grid = SplineGrid::new(min, max, intervals, degree)?;
        if out_len != grid.basis_count() {
            return Err(invalid(format!("out_len {out_len} but the grid has {} basis functions", grid.basis_count())));
        }
        let b = bspline_basis(x, &grid)?;
        out_slice(out, out_len, "out")?.copy_from_slice(&b);
        Ok(())
    })
}

fn boxed(model: Model, out: *mut *mut HpModel) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(HpModel { model })) };
    Ok(())
}

/// Creates a model with the default configuration and fresh parameters.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn hp_model_new_default(seed: u64, out: *mut *mut HpModel) -> HpStatus {
    guard(|| boxed(Model::new(ModelConfig::default(), seed)?, out))
}

/// Creates a model from the `[model]` section of a TOML run configuration.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hp_model_from_config(config_toml: *const c_char, seed: u64, out: *mut *mut HpModel) -> HpStatus {
    guard(|| {
        let cfg = RunConfig::parse(c_str(config_toml, "config_toml")?)?;
        boxed(Model::new(cfg.model, seed)?, out)
    })
}

/// Loads a trained model from its configuration file and checkpoint.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hp_model_load(config_path: *const c_char, checkpoint_path: *const c_char, out: *mut *mut HpModel) -> HpStatus {
    guard(|| {
        let cfg = RunConfig::load(Path::new(c_str(config_path, "config_path")?))?;
        let params = load_checkpoint(Path::new(c_str(checkpoint_path, "checkpoint_path")?), &cfg.model)?;
        boxed(
            Model {
                config: cfg.model,
                params,
            },
            out,
        )
    })
}

/// Writes the model's frame count, points per frame and class count.
///
/// # Safety
/// `model` must come from a `hp_model_*` constructor; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn hp_model_shape(model: *const HpModel, frames: *mut usize, points: *mut usize, classes: *mut usize) -> HpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.model.config;
        for (ptr, v) in [(frames, c.frames), (points, c.points), (classes, c.classes)] {
            if let Some(p) = ptr.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Class logits of one sequence of `frames` frames with `points` points
/// each (`frames * points * 3` doubles, frame-major).
///
/// # Safety
/// `xyz` must hold `frames * points * 3` doubles and `logits` room for
/// `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hp_model_forward(
    model: *const HpModel,
    xyz: *const f64,
    frames: usize,
    points_per_frame: usize,
    logits: *mut f64,
    logits_len: usize,
) -> HpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if frames == 0 || points_per_frame == 0 {
            return Err(invalid("frames and points must be positive"));
        }
        if logits_len != m.model.config.classes {
            return Err(invalid(format!("logits_len {logits_len} but the model has {} classes", m.model.config.classes)));
        }
        let all = points(xyz, frames * points_per_frame, "xyz")?;
        let seq = PointCloudSequence::new(
            all.chunks(points_per_frame)
                .map(|c| PointCloudFrame::new(c.to_vec()))
                .collect::<hyperpoint::Result<Vec<_>>>()?,
        )?;
        let out = m.model.forward(&seq)?;
        out_slice(logits, logits_len, "logits")?.copy_from_slice(&out);
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from a `hp_model_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn hp_model_free(model: *mut HpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
