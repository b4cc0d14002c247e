//! C ABI for the patternloom core: opaque handles, UTF-8 JSON strings
//! in and out, and integer status codes. Every returned string is owned
//! by the caller and must be released with `pl_string_free`.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use patternloom::advisor::{self, DomainConstraints};
use patternloom::catalog::Catalog;
use patternloom::governance::{evaluate_gate, ActionRequest, RuleSet};
use patternloom::model::tokenize;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    DomainError = 4,
}

/// Opaque catalog handle.
pub struct PlCatalog {
    inner: Catalog,
}

fn to_owned_c_string(s: String) -> *mut c_char {
    // JSON output never contains interior NULs.
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

unsafe fn read_utf8<'a>(ptr: *const c_char) -> Result<&'a str, PlStatus> {
    if ptr.is_null() {
        return Err(PlStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| PlStatus::InvalidUtf8)
}

/// Create a catalog from the built-in matrix data.
#[no_mangle]
pub extern "C" fn pl_catalog_new() -> *mut PlCatalog {
    Box::into_raw(Box::new(PlCatalog { inner: Catalog::builtin() }))
}

/// Create a catalog from catalog JSON. Returns NULL on invalid input.
///
/// # Safety
/// `json` must be a valid NUL-terminated C string or NULL.
#[no_mangle]
pub unsafe extern "C" fn pl_catalog_from_json(json: *const c_char) -> *mut PlCatalog {
    let Ok(text) = (unsafe { read_utf8(json) }) else { return ptr::null_mut() };
    match Catalog::from_json(text) {
        Ok(inner) => Box::into_raw(Box::new(PlCatalog { inner })),
        Err(_) => ptr::null_mut(),
    }
}

/// Release a catalog handle. NULL is a no-op.
///
/// # Safety
/// `catalog` must have come from `pl_catalog_new`/`pl_catalog_from_json`
/// and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pl_catalog_free(catalog: *mut PlCatalog) {
    if !catalog.is_null() {
        drop(unsafe { Box::from_raw(catalog) });
    }
}

/// Number of named pattern cells, or 0 on NULL.
///
/// # Safety
/// `catalog` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pl_catalog_named_count(catalog: *const PlCatalog) -> u64 {
    match unsafe { catalog.as_ref() } {
        Some(c) => c.inner.orthogonality_report().named as u64,
        None => 0,
    }
}

/// Orthogonality report as a JSON string written to `*out`.
///
/// # Safety
/// `catalog` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pl_catalog_report_json(
    catalog: *const PlCatalog,
    out: *mut *mut c_char,
) -> PlStatus {
    if out.is_null() {
        return PlStatus::NullArgument;
    }
    let Some(c) = (unsafe { catalog.as_ref() }) else { return PlStatus::NullArgument };
    let json = serde_json::to_string(&c.inner.orthogonality_report()).unwrap();
    unsafe { *out = to_owned_c_string(json) };
    PlStatus::Ok
}

/// Run the advisor on `constraints_json` (a DomainConstraints record)
/// and write the Recommendation JSON to `*out`.
///
/// # Safety
/// `catalog` must be a live handle; `constraints_json` a valid C
/// string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pl_advise_json(
    catalog: *const PlCatalog,
    constraints_json: *const c_char,
    out: *mut *mut c_char,
) -> PlStatus {
    if out.is_null() {
        return PlStatus::NullArgument;
    }
    let Some(c) = (unsafe { catalog.as_ref() }) else { return PlStatus::NullArgument };
    let text = match unsafe { read_utf8(constraints_json) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    let constraints: DomainConstraints = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(_) => return PlStatus::InvalidJson,
    };
    let rec = advisor::recommend(&constraints, &c.inner);
    unsafe { *out = to_owned_c_string(serde_json::to_string(&rec).unwrap()) };
    PlStatus::Ok
}

/// Validate the four built-in case studies; Ok only when all pass.
///
/// # Safety
/// `catalog` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pl_check_fixtures(catalog: *const PlCatalog) -> PlStatus {
    let Some(c) = (unsafe { catalog.as_ref() }) else { return PlStatus::NullArgument };
    if advisor::check_fixtures(&c.inner).iter().all(|r| r.pass) {
        PlStatus::Ok
    } else {
        PlStatus::DomainError
    }
}

/// Evaluate an approval gate: `action_json` is an ActionRequest,
/// `rules_json` a {deny,allow} rule set; the decision JSON lands in
/// `*out`.
///
/// # Safety
/// Both JSON arguments must be valid C strings; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pl_gate_eval_json(
    action_json: *const c_char,
    rules_json: *const c_char,
    out: *mut *mut c_char,
) -> PlStatus {
    if out.is_null() {
        return PlStatus::NullArgument;
    }
    let action = match unsafe { read_utf8(action_json) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    let rules = match unsafe { read_utf8(rules_json) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    let action: ActionRequest = match serde_json::from_str(action) {
        Ok(v) => v,
        Err(_) => return PlStatus::InvalidJson,
    };
    let rules: RuleSet = match serde_json::from_str(rules) {
        Ok(v) => v,
        Err(_) => return PlStatus::InvalidJson,
    };
    let decision = evaluate_gate(&action, &rules);
    unsafe { *out = to_owned_c_string(serde_json::to_string(&decision).unwrap()) };
    PlStatus::Ok
}

/// Token count of a UTF-8 string under the fixed chars/4 tokenizer;
/// 0 for NULL or invalid UTF-8.
///
/// # Safety
/// `text` must be a valid NUL-terminated C string or NULL.
#[no_mangle]
pub unsafe extern "C" fn pl_tokenize(text: *const c_char) -> u64 {
    match unsafe { read_utf8(text) } {
        Ok(t) => tokenize(t),
        Err(_) => 0,
    }
}

/// Release a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` must have been returned by a pl_* function and not freed before.
#[no_mangle]
pub unsafe extern "C" fn pl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn take_string(p: *mut c_char) -> String {
        assert!(!p.is_null());
        let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
        unsafe { pl_string_free(p) };
        s
    }

    #[test]
    fn catalog_lifecycle_and_report() {
        let cat = pl_catalog_new();
        assert_eq!(unsafe { pl_catalog_named_count(cat) }, 28);
        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(unsafe { pl_catalog_report_json(cat, &mut out) }, PlStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
        assert_eq!(report["named"], 28);
        assert_eq!(report["empty"], 14);
        unsafe { pl_catalog_free(cat) };
    }

    #[test]
    fn advise_round_trip() {
        let cat = pl_catalog_new();
        let constraints = CString::new(
            r#"{"time_budget_secs":60,"volume":"single","authority":"advisory_only",
                "failure_asymmetry":"asymmetric_false_negative","domain_tag":"healthcare"}"#,
        )
        .unwrap();
        let mut out: *mut c_char = ptr::null_mut();
        let status = unsafe { pl_advise_json(cat, constraints.as_ptr(), &mut out) };
        assert_eq!(status, PlStatus::Ok);
        let rec: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
        assert_eq!(rec["primary_topology"], "T1");
        assert_eq!(rec["critic_bias"], -0.2);
        assert_eq!(unsafe { pl_check_fixtures(cat) }, PlStatus::Ok);
        unsafe { pl_catalog_free(cat) };
    }

    #[test]
    fn gate_eval_and_error_codes() {
        let action = CString::new(
            r#"{"tool":"db","args":{},"reversibility":"irreversible","impact":"high"}"#,
        )
        .unwrap();
        let rules = CString::new(
            r#"{"deny":[{"id":"d1","all":[{"field":"impact","op":"eq","value":"high"}]}]}"#,
        )
        .unwrap();
        let mut out: *mut c_char = ptr::null_mut();
        let status = unsafe { pl_gate_eval_json(action.as_ptr(), rules.as_ptr(), &mut out) };
        assert_eq!(status, PlStatus::Ok);
        let decision: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
        assert_eq!(decision["verdict"], "Deny");
        assert_eq!(decision["matched_rule"], "d1");

        let bad = CString::new("{not json").unwrap();
        let status =
            unsafe { pl_gate_eval_json(bad.as_ptr(), rules.as_ptr(), &mut out) };
        assert_eq!(status, PlStatus::InvalidJson);
        let status = unsafe { pl_gate_eval_json(ptr::null(), rules.as_ptr(), &mut out) };
        assert_eq!(status, PlStatus::NullArgument);
    }

    #[test]
    fn tokenize_matches_core() {
        let text = CString::new("twelve chars").unwrap();
        assert_eq!(unsafe { pl_tokenize(text.as_ptr()) }, 3);
        assert_eq!(unsafe { pl_tokenize(ptr::null()) }, 0);
    }

    #[test]
    fn header_is_generated() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("include")
            .join("patternloom.h");
        let text = std::fs::read_to_string(header).unwrap();
        for symbol in
            ["pl_catalog_new", "pl_advise_json", "pl_gate_eval_json", "pl_string_free"]
        {
            assert!(text.contains(symbol), "header missing {symbol}");
        }
    }
}
