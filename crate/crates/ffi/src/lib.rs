//! C ABI over `tmc-core`: load checkpoints, evaluate, compose and unlearn.
//!
//! Models live behind opaque handles that the caller releases with the
//! matching `_free` function. Every fallible call returns a [`TmcStatus`];
//! on failure the message is available from [`tmc_last_error_message`] on
//! the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use tmc_core::io::checkpoint::{load_base, load_tangent, save_tangent, CheckpointMeta};
use tmc_core::{compose_many, BaseModel, Error, TangentModel};

/// Result of every fallible call. Codes 2 to 7 match the exit codes of the
/// `tmc` command-line tool.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TmcStatus {
    Ok = 0,
    /// Shape or weight validation failed inside the library.
    Invalid = 1,
    Config = 2,
    Data = 3,
    /// Non-finite values or a diverged computation.
    Numeric = 4,
    Io = 5,
    /// Corrupt, mismatched or incompatible checkpoint.
    Checkpoint = 6,
    /// Unknown or duplicate task, or a model without a component log.
    Task = 7,
    NullPointer = 8,
    /// A string argument that is not valid UTF-8, or a zero-length array.
    BadArgument = 9,
    /// The output buffer is shorter than the number of classes.
    BufferTooSmall = 10,
    /// A Rust panic was caught at the boundary.
    Panic = 11,
}

/// Frozen pre-trained network.
pub struct TmcBase {
    inner: Arc<BaseModel>,
}

/// Tangent model: a base network plus a parameter offset.
pub struct TmcTangent {
    inner: TangentModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TmcStatus {
    match e.exit_code() {
        2 => TmcStatus::Config,
        3 => TmcStatus::Data,
        4 => TmcStatus::Numeric,
        5 => TmcStatus::Io,
        6 => TmcStatus::Checkpoint,
        7 => TmcStatus::Task,
        _ => TmcStatus::Invalid,
    }
}

struct Fail(TmcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TmcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for [`tmc_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TmcStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            TmcStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TmcStatus::BadArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn write_scores(scores: &[f64], out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len < scores.len() {
        return Err(Fail(
            TmcStatus::BufferTooSmall,
            format!(
                "output buffer holds {out_len} values, {} needed",
                scores.len()
            ),
        ));
    }
    // SAFETY: the caller guarantees `out` points to `out_len` writable values.
    unsafe { ptr::copy_nonoverlapping(scores.as_ptr(), out, scores.len()) };
    Ok(())
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn tmc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tmc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a base checkpoint written by `tmc pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tmc_base_load(path: *const c_char, out: *mut *mut TmcBase) -> TmcStatus {
    guard(|| {
        let path = path_arg(path)?;
        let (model, _) = load_base(&path)?;
        write_out(
            out,
            TmcBase {
                inner: Arc::new(model),
            },
        )
    })
}

/// # Safety
/// `base` must come from [`tmc_base_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tmc_base_free(base: *mut TmcBase) {
    if !base.is_null() {
        drop(Box::from_raw(base));
    }
}

/// Input width of the network, or 0 for a null handle.
///
/// # Safety
/// `base` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tmc_base_input_dim(base: *const TmcBase) -> usize {
    base.as_ref().map_or(0, |b| b.inner.spec().input_dim())
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `base` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tmc_base_num_classes(base: *const TmcBase) -> usize {
    base.as_ref().map_or(0, |b| b.inner.num_classes())
}

/// Logits of the base network for one input row.
///
/// # Safety
/// `x` must point to `x_len` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn tmc_base_forward(
    base: *const TmcBase,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> TmcStatus {
    guard(|| {
        let base = handle(base, "base")?;
        let x = slice_arg(x, x_len, "input")?;
        write_scores(&base.inner.forward(x)?, out, out_len)
    })
}

/// Loads a tangent checkpoint. Fails with [`TmcStatus::Checkpoint`] unless
/// it was trained on `base`.
///
/// # Safety
/// `base` must be a live handle, `path` a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tmc_tangent_load(
    base: *const TmcBase,
    path: *const c_char,
    out: *mut *mut TmcTangent,
) -> TmcStatus {
    guard(|| {
        let base = handle(base, "base")?;
        let path = path_arg(path)?;
        let (model, _) = load_tangent(&path, &base.inner)?;
        write_out(out, TmcTangent { inner: model })
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tmc_tangent_save(
    model: *const TmcTangent,
    path: *const c_char,
) -> TmcStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let path = path_arg(path)?;
        save_tangent(&path, &model.inner, &CheckpointMeta::default())?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tmc_tangent_free(model: *mut TmcTangent) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tasks folded into the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tmc_tangent_task_count(model: *const TmcTangent) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.task_count())
}

/// Logits of the linearized model for one input row.
///
/// # Safety
/// `x` must point to `x_len` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn tmc_tangent_forward(
    model: *const TmcTangent,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> TmcStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let x = slice_arg(x, x_len, "input")?;
        write_scores(&model.inner.forward(x)?, out, out_len)
    })
}

/// Composes `count` components into a new model.
///
/// With `weights` null the components are merged in order with the uniform
/// running average and the component log is kept when every input has one,
/// so the result supports [`tmc_tangent_unlearn`]. Otherwise `weights` holds
/// `count` finite coefficients; convex ones give the logit ensemble.
///
/// # Safety
/// `components` must point to `count` live handles, `weights` must be null or
/// point to `count` values, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmc_tangent_compose(
    components: *const *const TmcTangent,
    count: usize,
    weights: *const f64,
    out: *mut *mut TmcTangent,
) -> TmcStatus {
    guard(|| {
        if count == 0 {
            return Err(Fail(
                TmcStatus::BadArgument,
                "no components to compose".into(),
            ));
        }
        let parts: Vec<&TangentModel> = slice_arg(components, count, "components")?
            .iter()
            .map(|&p| handle(p, "component").map(|h| &h.inner))
            .collect::<Result<_, _>>()?;
        let composed = if weights.is_null() {
            let anchor = Arc::clone(parts[0].base());
            let mut running = if parts.iter().all(|p| p.component_log().is_some()) {
                TangentModel::at_anchor_tracked(anchor)
            } else {
                TangentModel::at_anchor(anchor)
            };
            for p in &parts {
                running = running.absorb_next(p)?;
            }
            running
        } else {
            compose_many(&parts, slice_arg(weights, count, "weights")?)?
        };
        write_out(out, TmcTangent { inner: composed })
    })
}

/// Removes task `task_id` from a composition that kept its component log.
/// With `rescale` nonzero the remaining coefficients are renormalized.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tmc_tangent_unlearn(
    model: *const TmcTangent,
    task_id: u32,
    rescale: i32,
    out: *mut *mut TmcTangent,
) -> TmcStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let removed = model.inner.unlearn(task_id, rescale != 0)?;
        write_out(out, TmcTangent { inner: removed })
    })
}
