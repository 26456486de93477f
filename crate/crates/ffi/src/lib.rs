//! C interface to `entropy_sums`.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns
//! an [`EsStatus`]; the message of the last failure on the calling thread is
//! available from [`es_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use entropy_sums::decompose::{ppca_stationary_elbo, verify_stationary};
use entropy_sums::inference::{fit_em, fit_ppca_report, initialize, FitOptions, FitReport};
use entropy_sums::models::{Dataset, ModelSpec};
use entropy_sums::numerics::Matrix;
use entropy_sums::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Domain = 3,
    Contract = 4,
    Numerical = 5,
    Capacity = 6,
    DegenerateComponent = 7,
    Unsupported = 8,
    NotApplicable = 9,
    Io = 10,
    Json = 11,
    Panic = 12,
}

/// A parsed model.
pub struct EsModel(ModelSpec);

/// A dataset of observation rows.
pub struct EsDataset(Dataset);

/// The result of a fit.
pub struct EsFit(FitReport);

/// Outcome of comparing the ELBO with the entropy sum.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EsVerdict {
    pub elbo: f64,
    pub entropy_sum: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub pass: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> EsStatus {
    match e {
        Error::Domain(_) => EsStatus::Domain,
        Error::Contract(_) => EsStatus::Contract,
        Error::Numerical(_) => EsStatus::Numerical,
        Error::Capacity(_) => EsStatus::Capacity,
        Error::DegenerateComponent { .. } => EsStatus::DegenerateComponent,
        Error::Unsupported(_) => EsStatus::Unsupported,
        Error::NotApplicable(_) => EsStatus::NotApplicable,
        Error::Io(_) => EsStatus::Io,
        Error::Json(_) => EsStatus::Json,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F>(f: F) -> EsStatus
where
    F: FnOnce() -> Result<(), (EsStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EsStatus::Panic
        }
    }
}

fn lift(e: Error) -> (EsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (EsStatus, String) {
    (EsStatus::NullArgument, format!("{what} is null"))
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, (EsStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| (EsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (EsStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), (EsStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn es_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn es_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a model from its JSON description.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_model_from_json(json: *const c_char, out: *mut *mut EsModel) -> EsStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        let model: ModelSpec = serde_json::from_str(text).map_err(|e| lift(e.into()))?;
        store(out, EsModel(model))
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn es_model_free(model: *mut EsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mean log marginal likelihood `(1/N) Σ log p(x_n)` of a dataset.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_model_mean_log_likelihood(
    model: *const EsModel,
    data: *const EsDataset,
    out: *mut f64,
) -> EsStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let d = &deref(data, "data")?.0;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let mut total = 0.0;
        for x in d.rows() {
            total += m.log_marginal(x).map_err(lift)?;
        }
        *out = total / d.len() as f64;
        Ok(())
    })
}

/// Draws `n` rows from `model` with the given seed.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_model_sample(
    model: *const EsModel,
    n: usize,
    seed: u64,
    out: *mut *mut EsDataset,
) -> EsStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        store(out, EsDataset(m.sample(n, seed).map_err(lift)?))
    })
}

/// Parses a dataset in the JSON-lines format written by the `entsum` tool.
///
/// # Safety
/// `jsonl` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_dataset_from_jsonl(jsonl: *const c_char, out: *mut *mut EsDataset) -> EsStatus {
    guard(|| {
        let text = read_str(jsonl, "jsonl")?;
        store(out, EsDataset(Dataset::read_jsonl(text.as_bytes()).map_err(lift)?))
    })
}

/// Number of rows, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn es_dataset_len(data: *const EsDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Row length, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn es_dataset_dim(data: *const EsDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.dim())
}

/// # Safety
/// `data` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn es_dataset_free(data: *mut EsDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// EM from a seeded initialization with the structure of `model`. Pass 0 for
/// `max_iters` or a non-positive tolerance to use the default.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_fit_em(
    model: *const EsModel,
    data: *const EsDataset,
    seed: u64,
    max_iters: usize,
    tol_elbo: f64,
    tol_grad: f64,
    out: *mut *mut EsFit,
) -> EsStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let d = &deref(data, "data")?.0;
        let defaults = FitOptions::default();
        let opts = FitOptions {
            max_iters: if max_iters == 0 { defaults.max_iters } else { max_iters },
            tol_elbo: if tol_elbo > 0.0 { tol_elbo } else { defaults.tol_elbo },
            tol_grad: if tol_grad > 0.0 { tol_grad } else { defaults.tol_grad },
            accelerate: defaults.accelerate,
        };
        let init = initialize(m, d, seed).map_err(lift)?;
        store(out, EsFit(fit_em(&init, d, &opts).map_err(lift)?))
    })
}

/// Closed-form p-PCA fit with `h` latent dimensions.
///
/// # Safety
/// `data` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_fit_ppca(data: *const EsDataset, h: usize, out: *mut *mut EsFit) -> EsStatus {
    guard(|| {
        let d = &deref(data, "data")?.0;
        store(out, EsFit(fit_ppca_report(d, h, &FitOptions::default()).map_err(lift)?))
    })
}

/// Whether the fit met its stationarity thresholds; false for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn es_fit_converged(fit: *const EsFit) -> bool {
    fit.as_ref().is_some_and(|f| f.0.converged)
}

/// Final ELBO of the fit.
///
/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_fit_final_elbo(fit: *const EsFit, out: *mut f64) -> EsStatus {
    guard(|| {
        let f = &deref(fit, "fit")?.0;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = *f.elbo_trajectory.last().expect("trajectory has the initial point");
        Ok(())
    })
}

/// Fitted model as a new handle.
///
/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_fit_model(fit: *const EsFit, out: *mut *mut EsModel) -> EsStatus {
    guard(|| {
        let f = &deref(fit, "fit")?.0;
        store(out, EsModel(f.final_params.clone()))
    })
}

/// The full fit report as JSON; free with [`es_string_free`].
///
/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_fit_to_json(fit: *const EsFit, out: *mut *mut c_char) -> EsStatus {
    guard(|| {
        let f = &deref(fit, "fit")?.0;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let text = entropy_sums::artifact::to_json_line(f).map_err(lift)?;
        *out = CString::new(text).map_err(|_| (EsStatus::Json, "interior NUL".into()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `fit` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn es_fit_free(fit: *mut EsFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Compares the (pseudo-)ELBO with the entropy sum at the fitted parameters.
/// A non-positive `tol` selects the default.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_verify(
    fit: *const EsFit,
    data: *const EsDataset,
    tol: f64,
    out: *mut EsVerdict,
) -> EsStatus {
    guard(|| {
        let f = &deref(fit, "fit")?.0;
        let d = &deref(data, "data")?.0;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let tol = if tol > 0.0 { tol } else { entropy_sums::decompose::DEFAULT_EQUALITY_TOL };
        let v = verify_stationary(f, d, tol).map_err(lift)?;
        *out = EsVerdict { elbo: v.elbo, entropy_sum: v.entropy_sum, abs_gap: v.abs_gap, rel_gap: v.rel_gap, pass: v.pass };
        Ok(())
    })
}

/// Stationary p-PCA ELBO for a row-major `d × h` loading matrix.
///
/// # Safety
/// `w` must point to `d * h` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_ppca_stationary_elbo(
    w: *const f64,
    d: usize,
    h: usize,
    sigma2: f64,
    out: *mut f64,
) -> EsStatus {
    guard(|| {
        if w.is_null() || out.is_null() {
            return Err(null("w or output pointer"));
        }
        let entries = std::slice::from_raw_parts(w, d * h).to_vec();
        let m = Matrix::from_vec(d, h, entries).map_err(lift)?;
        *out = ppca_stationary_elbo(&m, sigma2, d, h).map_err(lift)?;
        Ok(())
    })
}
