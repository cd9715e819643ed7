//! C ABI over the inference and evaluation half of `cycledepth`.
//!
//! Every function returns a [`CdStatus`]; on failure a message is kept in a
//! per-thread slot readable through [`cd_last_error`]. Models are opaque
//! [`CdModel`] handles obtained from [`cd_model_load`] and released with
//! [`cd_model_free`]. Images cross the boundary as planar `3×H×W` `float`
//! arrays in `[0, 1]`; disparity and depth maps as `H×W` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cycledepth::data::{disparity_to_depth, CameraParams};
use cycledepth::pipeline::{load_model, predict_disparity, LoadedModel, Which, MIN_DISPARITY};
use cycledepth::{compute_metrics, Error, NetworkBundle, Shape, Tensor};

/// Result of every `cd_*` call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Checkpoint = 6,
    NonFinite = 7,
    Panic = 8,
    Other = 9,
}

/// `which` value selecting the student network `G_s`.
pub const CD_WHICH_STUDENT: u32 = 0;
/// `which` value selecting the refined output of the full cycle.
pub const CD_WHICH_TEACHER: u32 = 1;

/// Loaded network parameters. Opaque to C.
pub struct CdModel {
    bundle: NetworkBundle<f32>,
}

/// Depth metrics, mirroring the JSON report of `cycledepth eval`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CdEvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub pixels: u64,
    pub cap_meters: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CdStatus {
    match e {
        Error::ShapeMismatch { .. } => CdStatus::ShapeMismatch,
        Error::InvalidArgument { .. } | Error::NegativeDisparity { .. } | Error::Config(_) => {
            CdStatus::InvalidArgument
        }
        Error::Io { .. } => CdStatus::Io,
        Error::Format { .. } | Error::Json(_) => CdStatus::Format,
        Error::Checkpoint(_) => CdStatus::Checkpoint,
        Error::NonFinite { .. } => CdStatus::NonFinite,
        _ => CdStatus::Other,
    }
}

struct Failure(CdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: CdStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic in the thread's error slot.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            CdStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(CdStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

/// Message for the most recent failure on this thread, or NULL after a
/// success. The pointer stays valid until the next `cd_*` call on the same
/// thread.
#[no_mangle]
pub extern "C" fn cd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `cycledepth train`. On success `*out`
/// owns a handle that must be released with [`cd_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_load(path: *const c_char, out: *mut *mut CdModel) -> CdStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        // SAFETY: checked non-null; the caller promises NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(CdStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let bundle = match load_model(Path::new(path))? {
            LoadedModel::Bundle { bundle, .. } => bundle,
            LoadedModel::Oracle => {
                return Err(fail(
                    CdStatus::Checkpoint,
                    format!("{path}: oracle checkpoints carry no network"),
                ))
            }
        };
        let handle = Box::into_raw(Box::new(CdModel { bundle }));
        // SAFETY: checked non-null.
        unsafe { *out = handle };
        Ok(())
    })
}

/// Releases a handle from [`cd_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cd_model_free(model: *mut CdModel) {
    if !model.is_null() {
        // SAFETY: the caller hands back ownership of a live handle.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Input size the model was built for.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn cd_model_dims(model: *const CdModel, height: *mut usize, width: *mut usize) -> CdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(height, "height")?;
        non_null(width, "width")?;
        // SAFETY: all three checked non-null; the caller guarantees validity.
        unsafe {
            let m = &*model;
            *height = m.bundle.height;
            *width = m.bundle.width;
        }
        Ok(())
    })
}

/// Predicts the left-frame disparity of one right view.
///
/// `image` holds `3·height·width` floats (planar RGB), `out` receives
/// `height·width` disparities in pixels. `which` is [`CD_WHICH_STUDENT`] or
/// [`CD_WHICH_TEACHER`].
///
/// # Safety
/// `model` must be a live handle and both buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn cd_model_infer(
    model: *const CdModel,
    image: *const f32,
    height: usize,
    width: usize,
    which: u32,
    out: *mut f32,
) -> CdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(image, "image")?;
        non_null(out, "out")?;
        // SAFETY: checked non-null; the caller guarantees a live handle.
        let m = unsafe { &*model };
        if (height, width) != (m.bundle.height, m.bundle.width) {
            return Err(fail(
                CdStatus::ShapeMismatch,
                format!(
                    "image is {width}x{height}, model expects {}x{}",
                    m.bundle.width, m.bundle.height
                ),
            ));
        }
        let which = match which {
            CD_WHICH_STUDENT => Which::Student,
            CD_WHICH_TEACHER => Which::Teacher,
            other => return Err(fail(CdStatus::InvalidArgument, format!("unknown which value {other}"))),
        };
        let n = height * width;
        // SAFETY: the caller guarantees `3·n` readable floats.
        let pixels = unsafe { std::slice::from_raw_parts(image, 3 * n) }.to_vec();
        let input = Tensor::from_vec(Shape::new(1, 3, height, width), pixels)?;
        let disp = predict_disparity(&m.bundle, &input, which)?;
        // SAFETY: the caller guarantees `n` writable floats.
        unsafe { std::slice::from_raw_parts_mut(out, n) }.copy_from_slice(disp.data());
        Ok(())
    })
}

/// `depth = focal·baseline / max(disparity, min_disp)`, elementwise. Pass
/// `min_disp <= 0` for the library default.
///
/// # Safety
/// `disparity` must hold `len` floats and `out` `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cd_disparity_to_depth(
    disparity: *const f32,
    len: usize,
    focal_length: f64,
    baseline: f64,
    min_disp: f64,
    out: *mut f64,
) -> CdStatus {
    guard(|| {
        non_null(disparity, "disparity")?;
        non_null(out, "out")?;
        let camera = CameraParams::new(focal_length, baseline)?;
        let min_disp = if min_disp > 0.0 { min_disp } else { MIN_DISPARITY };
        // SAFETY: the caller guarantees `len` readable floats.
        let d = unsafe { std::slice::from_raw_parts(disparity, len) };
        let depth = disparity_to_depth(d, &camera, min_disp)?;
        // SAFETY: the caller guarantees `len` writable doubles.
        unsafe { std::slice::from_raw_parts_mut(out, len) }.copy_from_slice(&depth);
        Ok(())
    })
}

/// Depth metrics over pixels with `gt > 0`, both sides clipped to
/// `[0.1, cap_meters]`.
///
/// # Safety
/// `pred` and `gt` must each hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_compute_metrics(
    pred: *const f64,
    gt: *const f64,
    len: usize,
    cap_meters: f64,
    out: *mut CdEvalReport,
) -> CdStatus {
    guard(|| {
        non_null(pred, "pred")?;
        non_null(gt, "gt")?;
        non_null(out, "out")?;
        // SAFETY: the caller guarantees `len` readable doubles in each.
        let (p, g) = unsafe { (std::slice::from_raw_parts(pred, len), std::slice::from_raw_parts(gt, len)) };
        let r = compute_metrics(p, g, cap_meters)?;
        let report = CdEvalReport {
            abs_rel: r.abs_rel,
            sq_rel: r.sq_rel,
            rmse: r.rmse,
            rmse_log: r.rmse_log,
            a1: r.a1,
            a2: r.a2,
            a3: r.a3,
            pixels: r.pixels as u64,
            cap_meters: r.cap_meters,
        };
        // SAFETY: checked non-null.
        unsafe { *out = report };
        Ok(())
    })
}
