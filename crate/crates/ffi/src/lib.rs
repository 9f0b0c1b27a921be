//! C ABI over the aggssl library.
//!
//! Every function returns an [`AggsslStatus`]. On failure the message is
//! available from [`aggssl_last_error`] on the same thread until the next
//! call. Handles are opaque and must be released with their `_free`
//! function; strings returned by accessors are owned by the handle.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use aggssl::aggregator::{replay_selection, AggregationState, ReplayTables};
use aggssl::harness::{run_experiment, RunManifest};
use aggssl::lcka::{lcka, lcka_feature_form, FeatureMatrix};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggsslStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Bad input: configuration, fixture, shapes, out-of-range index.
    Invalid = 3,
    /// Failure while running.
    Runtime = 4,
    /// A panic was caught at the boundary.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(AggsslStatus, String);

impl From<aggssl::Error> for Failure {
    fn from(e: aggssl::Error) -> Self {
        let status = match &e {
            e if e.is_validation() => AggsslStatus::Invalid,
            aggssl::Error::ShapeMismatch { .. }
            | aggssl::Error::SampleCountMismatch { .. }
            | aggssl::Error::ProbeTooSmall { .. }
            | aggssl::Error::DegenerateRepresentation { .. }
            | aggssl::Error::InvalidTensor(_) => AggsslStatus::Invalid,
            _ => AggsslStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AggsslStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AggsslStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AggsslStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            AggsslStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AggsslStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn matrix(p: *const f64, n: usize, d: usize, tag: &str) -> Result<FeatureMatrix, Failure> {
    if p.is_null() {
        return Err(null(tag));
    }
    let len = n
        .checked_mul(d)
        .ok_or_else(|| Failure(AggsslStatus::Invalid, format!("{tag}: {n} x {d} overflows")))?;
    let values = std::slice::from_raw_parts(p, len).to_vec();
    Ok(FeatureMatrix::new(n, d, values, tag)?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn aggssl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aggssl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

type SimilarityFn = fn(&FeatureMatrix, &FeatureMatrix) -> aggssl::Result<f64>;

unsafe fn similarity(
    f: SimilarityFn,
    a: *const f64,
    b: *const f64,
    n: usize,
    da: usize,
    db: usize,
    out: *mut f64,
) -> AggsslStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = f(&matrix(a, n, da, "a")?, &matrix(b, n, db, "b")?)?;
        Ok(())
    })
}

/// Linear CKA between row-major `a` (n×da) and `b` (n×db).
///
/// # Safety
/// `a` and `b` must point to `n*da` and `n*db` readable doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn aggssl_lcka(
    a: *const f64,
    b: *const f64,
    n: usize,
    da: usize,
    db: usize,
    out: *mut f64,
) -> AggsslStatus {
    similarity(lcka, a, b, n, da, db, out)
}

/// Same score through the feature-space formula.
///
/// # Safety
/// As [`aggssl_lcka`].
#[no_mangle]
pub unsafe extern "C" fn aggssl_lcka_feature_form(
    a: *const f64,
    b: *const f64,
    n: usize,
    da: usize,
    db: usize,
    out: *mut f64,
) -> AggsslStatus {
    similarity(lcka_feature_form, a, b, n, da, db, out)
}

/// Result of a greedy selection replay.
pub struct AggsslTrace {
    state: AggregationState,
    selected: Vec<CString>,
}

/// Replays the greedy selection over a fixture CSV.
///
/// # Safety
/// `fixture_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aggssl_replay(fixture_path: *const c_char, out: *mut *mut AggsslTrace) -> AggsslStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = str_arg(fixture_path, "fixture_path")?;
        let state = replay_selection(&ReplayTables::load(Path::new(path))?)?;
        let selected = state
            .trace
            .iter()
            .map(|r| CString::new(r.selected.as_str()).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(AggsslTrace { state, selected }));
        Ok(())
    })
}

unsafe fn trace_ref<'a>(t: *const AggsslTrace) -> Result<&'a AggsslTrace, Failure> {
    t.as_ref().ok_or_else(|| null("trace"))
}

/// Number of iterations in the trace; 0 for a null handle.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aggssl_trace_len(trace: *const AggsslTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.state.trace.len())
}

/// Best accepted accuracy and number of selected tasks.
///
/// # Safety
/// `trace` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn aggssl_trace_summary(
    trace: *const AggsslTrace,
    best_acc: *mut f64,
    pool_size: *mut usize,
) -> AggsslStatus {
    guard(|| {
        let t = trace_ref(trace)?;
        *out_arg(best_acc, "best_acc")? = t.state.best_acc;
        *out_arg(pool_size, "pool_size")? = t.state.pool_a.len();
        Ok(())
    })
}

/// One iteration: the selected task (owned by the handle), its accuracy and
/// whether it was kept.
///
/// # Safety
/// `trace` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn aggssl_trace_iteration(
    trace: *const AggsslTrace,
    index: usize,
    selected: *mut *const c_char,
    acc: *mut f64,
    accepted: *mut bool,
) -> AggsslStatus {
    guard(|| {
        let t = trace_ref(trace)?;
        let r = t.state.trace.get(index).ok_or_else(|| {
            Failure(
                AggsslStatus::Invalid,
                format!("iteration {index} out of range ({} recorded)", t.state.trace.len()),
            )
        })?;
        *out_arg(selected, "selected")? = t.selected[index].as_ptr();
        *out_arg(acc, "acc")? = r.acc;
        *out_arg(accepted, "accepted")? = r.accepted;
        Ok(())
    })
}

/// Releases a trace handle. Null is ignored.
///
/// # Safety
/// `trace` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aggssl_trace_free(trace: *mut AggsslTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Manifest of a finished experiment run.
pub struct AggsslManifest {
    manifest: RunManifest,
    status: CString,
    json: CString,
}

/// Runs the experiment described by a config file. `output_root` may be null
/// to write relative to the working directory.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aggssl_run_experiment(
    config_path: *const c_char,
    output_root: *const c_char,
    out: *mut *mut AggsslManifest,
) -> AggsslStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let config = str_arg(config_path, "config_path")?;
        let root = if output_root.is_null() {
            None
        } else {
            Some(Path::new(str_arg(output_root, "output_root")?))
        };
        let manifest = run_experiment(Path::new(config), root)?;
        let json = manifest.to_json()?;
        *out = Box::into_raw(Box::new(AggsslManifest {
            status: CString::new(manifest.status.as_str()).unwrap_or_default(),
            json: CString::new(json).unwrap_or_default(),
            manifest,
        }));
        Ok(())
    })
}

/// Run status ("ok" or "failed"), owned by the handle; null for a null
/// handle.
///
/// # Safety
/// `manifest` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aggssl_manifest_status(manifest: *const AggsslManifest) -> *const c_char {
    manifest.as_ref().map_or(std::ptr::null(), |m| m.status.as_ptr())
}

/// The manifest as JSON, owned by the handle; null for a null handle.
///
/// # Safety
/// `manifest` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aggssl_manifest_json(manifest: *const AggsslManifest) -> *const c_char {
    manifest.as_ref().map_or(std::ptr::null(), |m| m.json.as_ptr())
}

/// Looks up one metric by key.
///
/// # Safety
/// `manifest` must be a live handle, `key` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aggssl_manifest_metric(
    manifest: *const AggsslManifest,
    key: *const c_char,
    out: *mut f64,
) -> AggsslStatus {
    guard(|| {
        let m = manifest.as_ref().ok_or_else(|| null("manifest"))?;
        let key = str_arg(key, "key")?;
        let v = m
            .manifest
            .metrics
            .get(key)
            .ok_or_else(|| Failure(AggsslStatus::Invalid, format!("no metric `{key}`")))?;
        *out_arg(out, "out")? = *v;
        Ok(())
    })
}

/// Releases a manifest handle. Null is ignored.
///
/// # Safety
/// `manifest` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aggssl_manifest_free(manifest: *mut AggsslManifest) {
    if !manifest.is_null() {
        drop(Box::from_raw(manifest));
    }
}
