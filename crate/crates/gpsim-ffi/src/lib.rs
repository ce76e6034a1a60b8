//! C ABI over the gpsim engines: opaque model handles, status codes, and
//! flat caller-allocated output buffers.
//!
//! Conventions:
//! - Every fallible function returns a [`GpsimStatus`]; on anything but
//!   `GPSIM_STATUS_OK` the thread-local error message is readable via
//!   [`gpsim_last_error`].
//! - Models are created from the same flat `key = value` config text the CLI
//!   uses, restricted to `model.*` keys, and must be released with
//!   [`gpsim_model_free`].
//! - Trajectory buffers are trajectory-major: sample `i`, step `k`,
//!   component `c` lives at `((i * (steps + 1)) + k) * state_dim + c`.
//!   Covariance buffers are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DVector;

use gpsim::config::parse_model_config_str;
use gpsim::gp::{GpModel, Horizon};
use gpsim::moments::{propagate_independent, propagate_linearized, TrajectoryCovariance};
use gpsim::proxy::{proxy_moments_closed_form, ProxySpec, ProxyVariant};
use gpsim::sampler::sample_trajectories;
use gpsim::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpsimStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were structurally invalid (dimensions, counts, variants).
    InvalidArgument = 2,
    /// The config text was rejected; see `gpsim_last_error`.
    ConfigInvalid = 3,
    /// A numeric failure (non-PSD covariance, divergence, degenerate
    /// spectrum) occurred during computation.
    NumericFailure = 4,
}

/// Opaque transition-model handle.
pub struct GpsimModel {
    inner: GpModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> GpsimStatus {
    match err {
        Error::ConfigInvalid { .. } | Error::Io(_) => GpsimStatus::ConfigInvalid,
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => GpsimStatus::InvalidArgument,
        _ => GpsimStatus::NumericFailure,
    }
}

fn fail(err: &Error) -> GpsimStatus {
    set_last_error(&err.to_string());
    status_of(err)
}

fn catch(f: impl FnOnce() -> GpsimStatus) -> GpsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_last_error("internal panic");
            GpsimStatus::NumericFailure
        }
    }
}

/// Version of the library as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gpsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the message of the last error on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length
/// including the NUL terminator; call with `len = 0` to query the size.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null when `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn gpsim_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            // Always NUL-terminate what was written.
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Builds a model from flat `key = value` config text restricted to
/// `model.*` keys (kernel, mean, process noise, optional training-data
/// path). On success writes an owned handle to `out`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be a valid pointer.
/// The handle must be released with [`gpsim_model_free`].
#[no_mangle]
pub unsafe extern "C" fn gpsim_model_from_config(
    text: *const c_char,
    out: *mut *mut GpsimModel,
) -> GpsimStatus {
    if text.is_null() || out.is_null() {
        set_last_error("null argument");
        return GpsimStatus::NullArgument;
    }
    let Ok(text) = CStr::from_ptr(text).to_str() else {
        set_last_error("config text is not valid UTF-8");
        return GpsimStatus::ConfigInvalid;
    };
    catch(|| match parse_model_config_str(text, "ffi-config") {
        Ok(model) => {
            *out = Box::into_raw(Box::new(GpsimModel { inner: model }));
            GpsimStatus::Ok
        }
        Err(e) => fail(&e),
    })
}

/// Releases a model handle. Passing null is a no-op.
///
/// # Safety
/// `model` must have been returned by [`gpsim_model_from_config`] and not
/// freed before.
#[no_mangle]
pub unsafe extern "C" fn gpsim_model_free(model: *mut GpsimModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension of the model (0 for a null handle).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gpsim_model_state_dim(model: *const GpsimModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).inner.state_dim()
    }
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Draws exact trajectory samples. `out` must hold
/// `samples * (steps + 1) * state_dim` doubles (trajectory-major layout; the
/// initial state is included as step 0 of every trajectory).
///
/// # Safety
/// `model` must be a live handle; `x0` must point to `state_dim` doubles;
/// `out` must point to the documented number of writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gpsim_sample_trajectories(
    model: *const GpsimModel,
    x0: *const f64,
    state_dim: usize,
    steps: usize,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> GpsimStatus {
    if model.is_null() || out.is_null() {
        set_last_error("null argument");
        return GpsimStatus::NullArgument;
    }
    let Some(x0) = slice_arg(x0, state_dim) else {
        set_last_error("null initial state");
        return GpsimStatus::NullArgument;
    };
    let model = &(*model).inner;
    if state_dim != model.state_dim() {
        set_last_error("state_dim does not match the model");
        return GpsimStatus::InvalidArgument;
    }
    let out = std::slice::from_raw_parts_mut(out, samples * (steps + 1) * state_dim);
    catch(move || {
        let horizon = match Horizon::new(steps, DVector::from_row_slice(x0)) {
            Ok(h) => h,
            Err(e) => return fail(&e),
        };
        match sample_trajectories(model, &horizon, samples, seed) {
            Ok(batch) => {
                for i in 0..samples {
                    for k in 0..=steps {
                        let x = batch.state(i, k);
                        let base = (i * (steps + 1) + k) * state_dim;
                        for c in 0..state_dim {
                            out[base + c] = x[c];
                        }
                    }
                }
                GpsimStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Correlation-aware linearized moment propagation. `means_out` must hold
/// `(steps + 1) * state_dim` doubles; `cov_out` is either null or a
/// `(steps * state_dim)^2` row-major buffer receiving the full trajectory
/// covariance over steps `1..=steps`.
///
/// # Safety
/// Pointer/length contracts as documented; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gpsim_propagate_linearized(
    model: *const GpsimModel,
    x0: *const f64,
    state_dim: usize,
    steps: usize,
    means_out: *mut f64,
    cov_out: *mut f64,
) -> GpsimStatus {
    if model.is_null() || means_out.is_null() {
        set_last_error("null argument");
        return GpsimStatus::NullArgument;
    }
    let Some(x0) = slice_arg(x0, state_dim) else {
        set_last_error("null initial state");
        return GpsimStatus::NullArgument;
    };
    let model = &(*model).inner;
    if state_dim != model.state_dim() {
        set_last_error("state_dim does not match the model");
        return GpsimStatus::InvalidArgument;
    }
    let means = std::slice::from_raw_parts_mut(means_out, (steps + 1) * state_dim);
    let cov = if cov_out.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts_mut(
            cov_out,
            steps * state_dim * steps * state_dim,
        ))
    };
    catch(move || {
        let horizon = match Horizon::new(steps, DVector::from_row_slice(x0)) {
            Ok(h) => h,
            Err(e) => return fail(&e),
        };
        match propagate_linearized(model, &horizon) {
            Ok(ms) => {
                for (k, m) in ms.means().iter().enumerate() {
                    for c in 0..state_dim {
                        means[k * state_dim + c] = m[c];
                    }
                }
                if let Some(cov) = cov {
                    if let TrajectoryCovariance::Full(full) = ms.covariance() {
                        let d = steps * state_dim;
                        for r in 0..d {
                            for c in 0..d {
                                cov[r * d + c] = full.entries()[(r, c)];
                            }
                        }
                    }
                }
                GpsimStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Independence-assumption baseline propagation. `means_out` as in
/// [`gpsim_propagate_linearized`]; `blocks_out` is either null or a
/// `steps * state_dim * state_dim` buffer receiving the per-step covariance
/// blocks (row-major, step-major).
///
/// # Safety
/// Pointer/length contracts as documented; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gpsim_propagate_independent(
    model: *const GpsimModel,
    x0: *const f64,
    state_dim: usize,
    steps: usize,
    means_out: *mut f64,
    blocks_out: *mut f64,
) -> GpsimStatus {
    if model.is_null() || means_out.is_null() {
        set_last_error("null argument");
        return GpsimStatus::NullArgument;
    }
    let Some(x0) = slice_arg(x0, state_dim) else {
        set_last_error("null initial state");
        return GpsimStatus::NullArgument;
    };
    let model = &(*model).inner;
    if state_dim != model.state_dim() {
        set_last_error("state_dim does not match the model");
        return GpsimStatus::InvalidArgument;
    }
    let means = std::slice::from_raw_parts_mut(means_out, (steps + 1) * state_dim);
    let blocks = if blocks_out.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts_mut(
            blocks_out,
            steps * state_dim * state_dim,
        ))
    };
    catch(move || {
        let horizon = match Horizon::new(steps, DVector::from_row_slice(x0)) {
            Ok(h) => h,
            Err(e) => return fail(&e),
        };
        match propagate_independent(model, &horizon) {
            Ok(ms) => {
                for (k, m) in ms.means().iter().enumerate() {
                    for c in 0..state_dim {
                        means[k * state_dim + c] = m[c];
                    }
                }
                if let Some(blocks) = blocks {
                    for (k, (_, var)) in ms.marginals().iter().enumerate() {
                        for r in 0..state_dim {
                            for c in 0..state_dim {
                                blocks[(k * state_dim + r) * state_dim + c] =
                                    var.entries()[(r, c)];
                            }
                        }
                    }
                }
                GpsimStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Closed-form per-step moments of a scalar reference system. `variant` is
/// one of `"1a"`, `"1b"`, `"2a"`, `"2b"`; `means_out` and `vars_out` must
/// each hold `steps + 1` doubles (step 0 included).
///
/// # Safety
/// `variant` must be NUL-terminated; output buffers must hold `steps + 1`
/// writable doubles each.
#[no_mangle]
pub unsafe extern "C" fn gpsim_proxy_moments(
    variant: *const c_char,
    gain: f64,
    signal_std: f64,
    noise_std: f64,
    x0: f64,
    steps: usize,
    means_out: *mut f64,
    vars_out: *mut f64,
) -> GpsimStatus {
    if variant.is_null() || means_out.is_null() || vars_out.is_null() {
        set_last_error("null argument");
        return GpsimStatus::NullArgument;
    }
    let Ok(tag) = CStr::from_ptr(variant).to_str() else {
        set_last_error("variant is not valid UTF-8");
        return GpsimStatus::InvalidArgument;
    };
    let Some(variant) = ProxyVariant::from_tag(tag) else {
        set_last_error("unknown variant (expected 1a, 1b, 2a or 2b)");
        return GpsimStatus::InvalidArgument;
    };
    let means = std::slice::from_raw_parts_mut(means_out, steps + 1);
    let vars = std::slice::from_raw_parts_mut(vars_out, steps + 1);
    catch(move || {
        match ProxySpec::new(variant, gain, signal_std, noise_std, x0, steps) {
            Ok(spec) => {
                for (k, (m, v)) in proxy_moments_closed_form(&spec).into_iter().enumerate() {
                    means[k] = m;
                    vars[k] = v;
                }
                GpsimStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
