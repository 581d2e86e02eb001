//! C ABI for the skipdepth library: opaque model handles, status codes,
//! buffer-based inference and metric evaluation.
//!
//! Conventions:
//! - every function returns an [`SdStatus`]; outputs go through pointers;
//! - handles come from `sd_model_load` and must be released with
//!   `sd_model_free`;
//! - `sd_last_error_message` returns a thread-local description of the
//!   most recent failure on the calling thread;
//! - handles are not synchronized: use one handle from one thread at a
//!   time (distinct handles are independent).

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use skipdepth::data::checkpoint::load_checkpoint;
use skipdepth::error::Error;
use skipdepth::infer::infer_depth;
use skipdepth::metrics::eval_metrics;
use skipdepth::model::DepthModel;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = sanitized);
}

/// Status codes returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdStatus {
    SdOk = 0,
    /// A required pointer argument was null.
    SdNullArgument = 1,
    /// File could not be read or written.
    SdIoError = 2,
    /// File content is malformed (checkpoint, image, depth map).
    SdFormatError = 3,
    /// Buffer extents violate the API contract (e.g. image too small).
    SdContractError = 4,
    /// Numerical failure inside the pipeline.
    SdRuntimeError = 5,
}

fn status_for(e: &Error) -> SdStatus {
    match e {
        Error::Io { .. } => SdStatus::SdIoError,
        Error::Format { .. } | Error::Checkpoint(_) | Error::Config(_) => SdStatus::SdFormatError,
        Error::Contract { .. } | Error::Dimension { .. } | Error::ShapeMismatch { .. } => {
            SdStatus::SdContractError
        }
        _ => SdStatus::SdRuntimeError,
    }
}

/// Opaque model handle.
pub struct SdModel {
    inner: DepthModel<f32>,
}

/// Aggregate depth metrics over one prediction/ground-truth pair.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SdMetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log10: f64,
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: u64,
}

fn guard<F: FnOnce() -> SdStatus>(f: F) -> SdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            SdStatus::SdRuntimeError
        }
    }
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn sd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent error on this thread; valid until the
/// next failing call from the same thread.
#[no_mangle]
pub extern "C" fn sd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a trained checkpoint into a fresh model handle.
///
/// # Safety
/// `checkpoint_path` must be a valid NUL-terminated string and `out` a
/// valid pointer; on success `*out` owns the model until `sd_model_free`.
#[no_mangle]
pub unsafe extern "C" fn sd_model_load(
    checkpoint_path: *const c_char,
    out: *mut *mut SdModel,
) -> SdStatus {
    guard(|| {
        if checkpoint_path.is_null() || out.is_null() {
            set_error("null argument");
            return SdStatus::SdNullArgument;
        }
        let path = match unsafe { CStr::from_ptr(checkpoint_path) }.to_str() {
            Ok(p) => p,
            Err(_) => {
                set_error("checkpoint path is not valid UTF-8");
                return SdStatus::SdFormatError;
            }
        };
        match load_checkpoint::<f32>(Path::new(path)) {
            Ok((model, _)) => {
                unsafe { *out = Box::into_raw(Box::new(SdModel { inner: model })) };
                SdStatus::SdOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Release a handle returned by `sd_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer from `sd_model_load` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sd_model_free(model: *mut SdModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Depth range the model was trained for.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sd_model_depth_range(
    model: *const SdModel,
    d_min: *mut f64,
    d_max: *mut f64,
) -> SdStatus {
    guard(|| {
        if model.is_null() || d_min.is_null() || d_max.is_null() {
            set_error("null argument");
            return SdStatus::SdNullArgument;
        }
        let model = unsafe { &*model };
        unsafe {
            *d_min = model.inner.config.d_min;
            *d_max = model.inner.config.d_max;
        }
        SdStatus::SdOk
    })
}

/// Predict metric depth for an interleaved row-major RGB buffer in [0, 1].
/// `depth_out` receives `height * width` values. `flip_average` non-zero
/// averages the prediction with the mirrored-image prediction.
///
/// # Safety
/// `rgb` must hold `height * width * 3` floats and `depth_out` room for
/// `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn sd_model_infer(
    model: *const SdModel,
    rgb: *const f32,
    height: usize,
    width: usize,
    flip_average: c_int,
    depth_out: *mut f32,
) -> SdStatus {
    guard(|| {
        if model.is_null() || rgb.is_null() || depth_out.is_null() {
            set_error("null argument");
            return SdStatus::SdNullArgument;
        }
        let model = unsafe { &*model };
        let image: Vec<f64> = unsafe { std::slice::from_raw_parts(rgb, height * width * 3) }
            .iter()
            .map(|v| *v as f64)
            .collect();
        match infer_depth(&model.inner, &image, height, width, flip_average != 0) {
            Ok(depth) => {
                let out = unsafe { std::slice::from_raw_parts_mut(depth_out, height * width) };
                for (o, d) in out.iter_mut().zip(&depth) {
                    *o = *d as f32;
                }
                SdStatus::SdOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Standard depth metrics over masked pixels; predictions are clamped to
/// `[d_min, d_max]`. `mask` may be null, meaning every pixel with positive
/// ground truth counts.
///
/// # Safety
/// `pred` and `gt` must hold `height * width` floats; `mask`, when
/// non-null, `height * width` bytes; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sd_metrics(
    pred: *const f32,
    gt: *const f32,
    mask: *const u8,
    height: usize,
    width: usize,
    d_min: f64,
    d_max: f64,
    out: *mut SdMetricReport,
) -> SdStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            set_error("null argument");
            return SdStatus::SdNullArgument;
        }
        let n = height * width;
        let pred: Vec<f64> =
            unsafe { std::slice::from_raw_parts(pred, n) }.iter().map(|v| *v as f64).collect();
        let gt: Vec<f64> =
            unsafe { std::slice::from_raw_parts(gt, n) }.iter().map(|v| *v as f64).collect();
        let mask: Vec<bool> = if mask.is_null() {
            gt.iter().map(|d| *d > 0.0).collect()
        } else {
            unsafe { std::slice::from_raw_parts(mask, n) }.iter().map(|m| *m != 0).collect()
        };
        match eval_metrics(&pred, &gt, &mask, (height, width), d_min, d_max, None) {
            Ok(r) => {
                unsafe {
                    *out = SdMetricReport {
                        abs_rel: r.abs_rel,
                        sq_rel: r.sq_rel,
                        rmse: r.rmse,
                        log10: r.log10,
                        silog: r.silog,
                        delta1: r.delta1,
                        delta2: r.delta2,
                        delta3: r.delta3,
                        n_valid: r.n_valid as u64,
                    };
                }
                SdStatus::SdOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}
