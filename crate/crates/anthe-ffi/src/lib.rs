//! C ABI for the analysis surface of `anthe-core`: configuration handling,
//! the parameter census, and tensor-chain shape planning.
//!
//! Conventions:
//! - Configurations are opaque handles created by `anthe_config_default` /
//!   `anthe_config_preset` and released with `anthe_config_free`.
//! - Every fallible function returns an [`AntheStatus`] code; `ANTHE_OK`
//!   is zero. On failure, `anthe_last_error` returns a thread-local,
//!   NUL-terminated message valid until the next failing call on the same
//!   thread.
//! - All `char*` inputs are NUL-terminated UTF-8. Output pointers must be
//!   non-null and properly aligned; out-parameters are written only on
//!   success.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

use anthe_core::config::{preset, ArchConfig};
use anthe_core::model::ModelPlan;
use anthe_core::tc::plan_factors;
use anthe_core::Error;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AntheStatus {
    AntheOk = 0,
    /// A required pointer argument was null.
    AntheNullPointer = 1,
    /// A string argument was not valid UTF-8.
    AntheInvalidUtf8 = 2,
    /// The configuration or an argument violates an invariant.
    AntheInvalidArgument = 3,
    /// Anything else (see `anthe_last_error`).
    AntheError = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: AntheStatus, msg: &str) -> AntheStatus {
    set_error(msg);
    status
}

fn fail_with(e: &Error) -> AntheStatus {
    let status = match e {
        Error::Config(_) | Error::Contract(_) | Error::Parse(_) => AntheStatus::AntheInvalidArgument,
        _ => AntheStatus::AntheError,
    };
    fail(status, &e.to_string())
}

/// Message for the most recent failure on this thread. Never null; empty
/// before any failure. The pointer is invalidated by the next failure on
/// the same thread.
#[no_mangle]
pub extern "C" fn anthe_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque configuration handle.
pub struct AntheConfig {
    inner: ArchConfig,
}

/// Creates the default configuration. Never fails; free with
/// `anthe_config_free`.
#[no_mangle]
pub extern "C" fn anthe_config_default() -> *mut AntheConfig {
    Box::into_raw(Box::new(AntheConfig {
        inner: ArchConfig::default(),
    }))
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, AntheStatus> {
    if ptr.is_null() {
        return Err(fail(AntheStatus::AntheNullPointer, "null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(AntheStatus::AntheInvalidUtf8, "string is not valid UTF-8"))
}

/// Creates a named preset configuration and stores it in `out`.
#[no_mangle]
pub unsafe extern "C" fn anthe_config_preset(
    name: *const c_char,
    out: *mut *mut AntheConfig,
) -> AntheStatus {
    if out.is_null() {
        return fail(AntheStatus::AntheNullPointer, "null out pointer");
    }
    let name = match cstr(name) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match preset(name) {
        Ok(cfg) => {
            *out = Box::into_raw(Box::new(AntheConfig { inner: cfg }));
            AntheStatus::AntheOk
        }
        Err(e) => fail_with(&e),
    }
}

/// Sets one configuration key (same keys as the CLI's `--set`).
#[no_mangle]
pub unsafe extern "C" fn anthe_config_set(
    cfg: *mut AntheConfig,
    key: *const c_char,
    value: *const c_char,
) -> AntheStatus {
    let Some(cfg) = cfg.as_mut() else {
        return fail(AntheStatus::AntheNullPointer, "null config handle");
    };
    let (key, value) = match (cstr(key), cstr(value)) {
        (Ok(k), Ok(v)) => (k, v),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    match cfg.inner.set(key, value) {
        Ok(()) => AntheStatus::AntheOk,
        Err(e) => fail_with(&e),
    }
}

/// Releases a configuration handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn anthe_config_free(cfg: *mut AntheConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Exact learnable-parameter counts per component.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AntheCensus {
    pub encoder_embedding: u64,
    pub decoder_embedding: u64,
    pub patt: u64,
    pub attention_output: u64,
    pub ff: u64,
    pub layer_norms: u64,
    pub output_projection: u64,
    pub total: u64,
}

/// Validates `cfg` and writes its parameter census to `out`.
#[no_mangle]
pub unsafe extern "C" fn anthe_census(
    cfg: *const AntheConfig,
    out: *mut AntheCensus,
) -> AntheStatus {
    let Some(cfg) = cfg.as_ref() else {
        return fail(AntheStatus::AntheNullPointer, "null config handle");
    };
    if out.is_null() {
        return fail(AntheStatus::AntheNullPointer, "null out pointer");
    }
    match ModelPlan::new(cfg.inner.clone()) {
        Ok(plan) => {
            let c = plan.census();
            *out = AntheCensus {
                encoder_embedding: c.encoder_embedding as u64,
                decoder_embedding: c.decoder_embedding as u64,
                patt: c.patt as u64,
                attention_output: c.attention_output as u64,
                ff: c.ff as u64,
                layer_norms: c.layer_norms as u64,
                output_projection: c.output_projection as u64,
                total: c.total as u64,
            };
            AntheStatus::AntheOk
        }
        Err(e) => fail_with(&e),
    }
}

/// A planned tensor-chain shape for a dense layer of `n_in x n_out`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AntheTcPlan {
    /// Chain length.
    pub n: u64,
    /// Shared bond dimension.
    pub bond: u64,
    /// Total parameters across the factors.
    pub param_count: u64,
    /// Requested compression ratio.
    pub r_target: f64,
    /// Achieved ratio (factor parameters over dense parameters).
    pub r_actual: f64,
}

/// Plans factor shapes for compressing an `n_in x n_out` dense layer to a
/// fraction `r` of its parameters with a chain of length `n`.
#[no_mangle]
pub unsafe extern "C" fn anthe_plan_factors(
    n_in: u64,
    n_out: u64,
    n: u64,
    r: f64,
    out: *mut AntheTcPlan,
) -> AntheStatus {
    if out.is_null() {
        return fail(AntheStatus::AntheNullPointer, "null out pointer");
    }
    let (Ok(n_in), Ok(n_out), Ok(n)) = (
        usize::try_from(n_in),
        usize::try_from(n_out),
        usize::try_from(n),
    ) else {
        return fail(AntheStatus::AntheInvalidArgument, "dimension overflows usize");
    };
    match plan_factors(n_in, n_out, n, r) {
        Ok(plan) => {
            *out = AntheTcPlan {
                n: plan.n() as u64,
                bond: plan.bond as u64,
                param_count: plan.param_count() as u64,
                r_target: plan.r_target,
                r_actual: plan.r_actual,
            };
            AntheStatus::AntheOk
        }
        Err(e) => fail_with(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use std::ptr;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn preset_census_matches_the_library() {
        unsafe {
            let mut cfg: *mut AntheConfig = ptr::null_mut();
            let status = anthe_config_preset(c("anthe").as_ptr(), &mut cfg);
            assert_eq!(status, AntheStatus::AntheOk);
            let mut census = AntheCensus::default();
            assert_eq!(anthe_census(cfg, &mut census), AntheStatus::AntheOk);
            assert_eq!(census.total, 30_506_048);
            assert_eq!(census.output_projection, 16_416_000);
            anthe_config_free(cfg);
        }
    }

    #[test]
    fn set_reconfigures_and_rejects_unknown_keys() {
        unsafe {
            let cfg = anthe_config_default();
            assert_eq!(
                anthe_config_set(cfg, c("n_vocab").as_ptr(), c("100").as_ptr()),
                AntheStatus::AntheOk
            );
            let status = anthe_config_set(cfg, c("blorp").as_ptr(), c("1").as_ptr());
            assert_eq!(status, AntheStatus::AntheInvalidArgument);
            let msg = CStr::from_ptr(anthe_last_error()).to_str().unwrap();
            assert!(msg.contains("blorp"), "{msg}");
            anthe_config_free(cfg);
        }
    }

    #[test]
    fn null_arguments_are_reported_not_crashed() {
        unsafe {
            let mut census = AntheCensus::default();
            assert_eq!(
                anthe_census(ptr::null(), &mut census),
                AntheStatus::AntheNullPointer
            );
            let cfg = anthe_config_default();
            assert_eq!(
                anthe_census(cfg, ptr::null_mut()),
                AntheStatus::AntheNullPointer
            );
            let mut out: *mut AntheConfig = ptr::null_mut();
            assert_eq!(
                anthe_config_preset(ptr::null(), &mut out),
                AntheStatus::AntheNullPointer
            );
            anthe_config_free(cfg);
            anthe_config_free(ptr::null_mut());
        }
    }

    #[test]
    fn plan_factors_reports_bond_and_ratio() {
        unsafe {
            let mut plan = AntheTcPlan::default();
            assert_eq!(
                anthe_plan_factors(512, 512, 2, 0.07, &mut plan),
                AntheStatus::AntheOk
            );
            assert_eq!(plan.bond, 14);
            assert_eq!(plan.param_count, 17_920);
            assert!(plan.r_actual <= 0.07);

            let status = anthe_plan_factors(512, 512, 2, 0.0, &mut plan);
            assert_ne!(status, AntheStatus::AntheOk);
        }
    }
}
