//! C ABI over the `corrfuse` library.
//!
//! Objects cross the boundary as opaque handles (`CfModel`, `CfEstimator`)
//! that the caller creates and frees through this API. Every fallible call
//! returns a [`CfStatus`]; on failure a human-readable message is available
//! from [`cf_last_error_message`] on the same thread. Panics never unwind
//! into C: they are caught and reported as `CF_PANIC`.
//!
//! Poses are passed as seven doubles `(w, x, y, z, tx, ty, tz)`: a rotation
//! quaternion followed by a translation in meters. Point arrays are `n`
//! packed `(x, y, z)` triples.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use corrfuse::metrics::{self, ObjectModel};
use corrfuse::net::{refine, PoseNet};
use corrfuse::pose::{Point3, RigidTransform};
use corrfuse::synth::{make_model, Observation, Shape};
use corrfuse::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfStatus {
    CfOk = 0,
    /// A required pointer argument was null.
    CfNullPointer = 1,
    /// An argument was out of range or malformed.
    CfInvalidArgument = 2,
    /// Array lengths did not match.
    CfShape = 3,
    /// A numeric failure such as a non-finite value.
    CfNumeric = 4,
    /// A file could not be read.
    CfIo = 5,
    /// A file was read but its contents are malformed.
    CfFormat = 6,
    /// An internal panic was caught at the boundary.
    CfPanic = 7,
}

/// A sampled object model with its symmetry metadata.
pub struct CfModel {
    model: ObjectModel,
}

/// A trained network loaded from a checkpoint.
pub struct CfEstimator {
    net: PoseNet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(CfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => CfStatus::CfShape,
            Error::Numeric(_) | Error::Divergence { .. } => CfStatus::CfNumeric,
            Error::Config(_) | Error::Input(_) | Error::TriggerNotReached { .. } => CfStatus::CfInvalidArgument,
            Error::Format { .. } => CfStatus::CfFormat,
            Error::Io { .. } => CfStatus::CfIo,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CfStatus::CfNullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CfStatus::CfInvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CfStatus::CfOk
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CfStatus::CfPanic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn read_pose(ptr: *const f64, what: &str) -> Result<RigidTransform, Failure> {
    let s = slice(ptr, 7, what)?;
    let mut a = [0.0; 7];
    a.copy_from_slice(s);
    Ok(RigidTransform::from_array(a)?)
}

unsafe fn write_pose(ptr: *mut f64, pose: &RigidTransform) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null("output pose"));
    }
    std::slice::from_raw_parts_mut(ptr, 7).copy_from_slice(&pose.to_array());
    Ok(())
}

unsafe fn read_points(ptr: *const f64, n: usize, what: &str) -> Result<Vec<Point3>, Failure> {
    let flat = slice(ptr, n.checked_mul(3).ok_or_else(|| invalid("point count overflows"))?, what)?;
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the most recent failure on this thread, or an empty
/// string after a successful call. The pointer stays valid until the next
/// call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Samples `points` surface points of a shape. `shape` is `box`,
/// `cylinder` or `lshape`, optionally with dimensions in meters such as
/// `box(0.1,0.07,0.05)`. Free the handle with [`cf_model_free`].
///
/// # Safety
/// `shape` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_model_create(
    shape: *const c_char,
    points: usize,
    seed: u64,
    out: *mut *mut CfModel,
) -> CfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let shape: Shape = read_str(shape, "shape")?.parse()?;
        let model = make_model(shape, points, seed)?;
        *out = Box::into_raw(Box::new(CfModel { model }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`cf_model_create`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cf_model_free(model: *mut CfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of sampled points in the model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_model_len(model: *const CfModel, out: *mut usize) -> CfStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(model, "model")?.model.len();
        Ok(())
    })
}

/// Copies the model points into `out`, which holds `capacity` points
/// (`3 * capacity` doubles). Fails with `CF_SHAPE` if it is too small.
///
/// # Safety
/// `out` must be writable for `3 * capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn cf_model_points(model: *const CfModel, out: *mut f64, capacity: usize) -> CfStatus {
    guard(|| {
        let pts = handle(model, "model")?.model.points();
        if capacity < pts.len() {
            return Err(Failure(
                CfStatus::CfShape,
                format!("buffer holds {capacity} points, model has {}", pts.len()),
            ));
        }
        if pts.is_empty() {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dst = std::slice::from_raw_parts_mut(out, pts.len() * 3);
        for (d, p) in dst.chunks_exact_mut(3).zip(pts) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Whether the model carries symmetry metadata (and so is scored with ADD-S).
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_model_is_symmetric(model: *const CfModel, out: *mut bool) -> CfStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(model, "model")?.model.is_symmetric();
        Ok(())
    })
}

/// Loads an estimator or refiner checkpoint written by `corrfuse train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_load(path: *const c_char, out: *mut *mut CfEstimator) -> CfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let net = PoseNet::load(Path::new(read_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(CfEstimator { net }));
        Ok(())
    })
}

/// Releases an estimator handle. Null is ignored.
///
/// # Safety
/// `estimator` must come from [`cf_estimator_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_free(estimator: *mut CfEstimator) {
    if !estimator.is_null() {
        drop(Box::from_raw(estimator));
    }
}

/// Most confident pose for an observed point cloud of `n` points with
/// per-point colors in `[0, 1]`.
///
/// # Safety
/// `points` and `colors` must hold `3 * n` doubles; `out_pose` 7 doubles.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_predict(
    estimator: *const CfEstimator,
    points: *const f64,
    colors: *const f64,
    n: usize,
    out_pose: *mut f64,
) -> CfStatus {
    guard(|| {
        let net = &handle(estimator, "estimator")?.net;
        let obs = Observation {
            points: read_points(points, n, "points")?,
            colors: read_points(colors, n, "colors")?,
        };
        let pose = net.estimate(&obs)?;
        write_pose(out_pose, &pose)
    })
}

/// Runs `iters` refinement steps from `initial_pose` with a refiner
/// checkpoint.
///
/// # Safety
/// As [`cf_estimator_predict`]; `initial_pose` must hold 7 doubles.
#[no_mangle]
pub unsafe extern "C" fn cf_estimator_refine(
    refiner: *const CfEstimator,
    points: *const f64,
    colors: *const f64,
    n: usize,
    initial_pose: *const f64,
    iters: usize,
    out_pose: *mut f64,
) -> CfStatus {
    guard(|| {
        let net = &handle(refiner, "refiner")?.net;
        let obs = Observation {
            points: read_points(points, n, "points")?,
            colors: read_points(colors, n, "colors")?,
        };
        let initial = read_pose(initial_pose, "initial_pose")?;
        let pose = refine(&initial, &obs, net, iters)?;
        write_pose(out_pose, &pose)
    })
}

unsafe fn distance(
    model: *const CfModel,
    pred: *const f64,
    gt: *const f64,
    out: *mut f64,
    f: fn(&ObjectModel, &RigidTransform, &RigidTransform) -> f64,
) -> CfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let model = &handle(model, "model")?.model;
        *out = f(model, &read_pose(pred, "pred")?, &read_pose(gt, "gt")?);
        Ok(())
    })
}

/// ADD distance in meters: mean distance between corresponding model points
/// under the two poses.
///
/// # Safety
/// `pred` and `gt` must hold 7 doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_add(model: *const CfModel, pred: *const f64, gt: *const f64, out: *mut f64) -> CfStatus {
    distance(model, pred, gt, out, metrics::add)
}

/// ADD-S distance in meters: mean closest-point distance between the model
/// under the two poses.
///
/// # Safety
/// As [`cf_add`].
#[no_mangle]
pub unsafe extern "C" fn cf_add_s(model: *const CfModel, pred: *const f64, gt: *const f64, out: *mut f64) -> CfStatus {
    distance(model, pred, gt, out, metrics::add_s)
}

/// Area under the accuracy-threshold curve on `[0, max_threshold]`, in
/// `[0, 100]`.
///
/// # Safety
/// `distances` must hold `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_auc(distances: *const f64, n: usize, max_threshold: f64, out: *mut f64) -> CfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = metrics::auc(slice(distances, n, "distances")?, max_threshold)?;
        Ok(())
    })
}

/// Fraction of distances strictly below `threshold`, in `[0, 1]`.
///
/// # Safety
/// As [`cf_auc`].
#[no_mangle]
pub unsafe extern "C" fn cf_accuracy_below(
    distances: *const f64,
    n: usize,
    threshold: f64,
    out: *mut f64,
) -> CfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = metrics::accuracy_below(slice(distances, n, "distances")?, threshold)?;
        Ok(())
    })
}

/// `out = a ∘ b`: apply `b` first, then `a`.
///
/// # Safety
/// Each pointer must hold 7 doubles. `out` may alias an input.
#[no_mangle]
pub unsafe extern "C" fn cf_pose_compose(a: *const f64, b: *const f64, out: *mut f64) -> CfStatus {
    guard(|| {
        let c = read_pose(a, "a")?.compose(&read_pose(b, "b")?);
        write_pose(out, &c)
    })
}

/// Inverse rigid transform.
///
/// # Safety
/// Both pointers must hold 7 doubles. `out` may alias `pose`.
#[no_mangle]
pub unsafe extern "C" fn cf_pose_inverse(pose: *const f64, out: *mut f64) -> CfStatus {
    guard(|| {
        let inv = read_pose(pose, "pose")?.inverse();
        write_pose(out, &inv)
    })
}

/// Transforms `n` points. `out` may alias `points`.
///
/// # Safety
/// `pose` must hold 7 doubles; `points` and `out` `3 * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cf_pose_apply(pose: *const f64, points: *const f64, n: usize, out: *mut f64) -> CfStatus {
    guard(|| {
        let pose = read_pose(pose, "pose")?;
        let moved = pose.apply(&read_points(points, n, "points")?);
        if n == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dst = std::slice::from_raw_parts_mut(out, n * 3);
        for (d, p) in dst.chunks_exact_mut(3).zip(&moved) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}
