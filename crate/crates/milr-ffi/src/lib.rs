//! C ABI surface for milr-core.
//!
//! Networks and recovery states are opaque handles. Every fallible function
//! returns a `MILR_STATUS_*` code; on error, a thread-local message is
//! available through [`milr_last_error_message`]. The matching declarations
//! live in `include/milr.h`.

use milr_core::fault::inject_bitflips;
use milr_core::milr::sidecar::{load_sidecar, save_sidecar};
use milr_core::milr::{detect, initialize, recover, MilrConfig, MilrState};
use milr_core::network::{builtin, Network};
use milr_core::rng::SplitMix64;
use milr_core::secded;
use milr_core::weights::{load_weights, save_weights};
use milr_core::{Dtype, MilrError, Tensor};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

pub const MILR_STATUS_OK: i32 = 0;
pub const MILR_STATUS_NULL_ARGUMENT: i32 = 1;
pub const MILR_STATUS_INVALID_UTF8: i32 = 2;
pub const MILR_STATUS_SHAPE: i32 = 3;
pub const MILR_STATUS_DTYPE: i32 = 4;
pub const MILR_STATUS_CONSTRUCTION: i32 = 5;
pub const MILR_STATUS_SINGULAR: i32 = 6;
pub const MILR_STATUS_NO_RECOVERY: i32 = 7;
pub const MILR_STATUS_PLAN_CORRUPTED: i32 = 8;
pub const MILR_STATUS_FORMAT: i32 = 9;
pub const MILR_STATUS_DOMAIN: i32 = 10;
pub const MILR_STATUS_IO: i32 = 11;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(err: MilrError) -> i32 {
    set_error(&err.to_string());
    match err {
        MilrError::Shape(_) => MILR_STATUS_SHAPE,
        MilrError::Dtype => MILR_STATUS_DTYPE,
        MilrError::Construction { .. } => MILR_STATUS_CONSTRUCTION,
        MilrError::Singular(_) => MILR_STATUS_SINGULAR,
        MilrError::NoRecovery(_) => MILR_STATUS_NO_RECOVERY,
        MilrError::PlanCorrupted(_) => MILR_STATUS_PLAN_CORRUPTED,
        MilrError::Format(_) => MILR_STATUS_FORMAT,
        MilrError::Domain(_) => MILR_STATUS_DOMAIN,
        MilrError::Io(_) => MILR_STATUS_IO,
    }
}

fn null_arg(what: &str) -> i32 {
    set_error(&format!("null argument: {what}"));
    MILR_STATUS_NULL_ARGUMENT
}

/// # Safety
/// `s` must be a valid NUL-terminated string or null.
unsafe fn cstr<'a>(s: *const c_char, what: &str) -> Result<&'a str, i32> {
    if s.is_null() {
        return Err(null_arg(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error(&format!("invalid UTF-8 in {what}"));
        MILR_STATUS_INVALID_UTF8
    })
}

pub struct MilrNetwork(Network);
pub struct MilrRecoveryState(MilrState);

/// Most recent error message on this thread, valid until the next failing
/// call. Never null.
#[no_mangle]
pub extern "C" fn milr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a named built-in architecture ("mnist", "cifar-small",
/// "cifar-large") with seeded random weights.
///
/// # Safety
/// `name` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn milr_network_builtin(
    name: *const c_char,
    use_f64: i32,
    seed: u64,
    out: *mut *mut MilrNetwork,
) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    let name = match cstr(name, "name") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let dtype = if use_f64 != 0 { Dtype::F64 } else { Dtype::F32 };
    match builtin(name, dtype, seed) {
        Ok(net) => {
            *out = Box::into_raw(Box::new(MilrNetwork(net)));
            MILR_STATUS_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn milr_network_load(path: *const c_char, out: *mut *mut MilrNetwork) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match load_weights(path) {
        Ok(net) => {
            *out = Box::into_raw(Box::new(MilrNetwork(net)));
            MILR_STATUS_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `net` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn milr_network_save(net: *const MilrNetwork, path: *const c_char) -> i32 {
    let Some(net) = net.as_ref() else {
        return null_arg("net");
    };
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match save_weights(&net.0, path) {
        Ok(()) => MILR_STATUS_OK,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `net` must be a handle from this library or null; it is consumed.
#[no_mangle]
pub unsafe extern "C" fn milr_network_free(net: *mut MilrNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn milr_network_param_count(net: *const MilrNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.param_count())
}

/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn milr_network_input_len(net: *const MilrNetwork) -> usize {
    net.as_ref()
        .map_or(0, |n| n.0.input_shape().iter().product())
}

/// Classifies one input, given as `input_len` values in row-major input
/// order, and writes the argmax class index to `class_out`.
///
/// # Safety
/// `net` must be live; `input` must point to `input_len` doubles;
/// `class_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn milr_network_predict(
    net: *const MilrNetwork,
    input: *const f64,
    input_len: usize,
    class_out: *mut usize,
) -> i32 {
    let Some(net) = net.as_ref() else {
        return null_arg("net");
    };
    if input.is_null() || class_out.is_null() {
        return null_arg("input/class_out");
    }
    let values = std::slice::from_raw_parts(input, input_len);
    let x = Tensor::from_f64_values(net.0.input_shape().to_vec(), values, net.0.dtype());
    if x.len() != input_len {
        set_error("input length does not match the network input shape");
        return MILR_STATUS_SHAPE;
    }
    match net.0.classify(&x) {
        Ok(class) => {
            *class_out = class;
            MILR_STATUS_OK
        }
        Err(e) => fail(e),
    }
}

/// Builds recovery state (checkpoints, detection records, plans) for a
/// network. `batch` of 0 means the default of 1 probe sample.
///
/// # Safety
/// `net` must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn milr_state_init(
    net: *const MilrNetwork,
    detect_seed: u64,
    recovery_seed: u64,
    batch: u32,
    out: *mut *mut MilrRecoveryState,
) -> i32 {
    let Some(net) = net.as_ref() else {
        return null_arg("net");
    };
    if out.is_null() {
        return null_arg("out");
    }
    let defaults = MilrConfig::default();
    let config = MilrConfig {
        detect_seed: if detect_seed == 0 { defaults.detect_seed } else { detect_seed },
        recovery_seed: if recovery_seed == 0 { defaults.recovery_seed } else { recovery_seed },
        batch: if batch == 0 { 1 } else { batch as usize },
    };
    match initialize(&net.0, config) {
        Ok(state) => {
            *out = Box::into_raw(Box::new(MilrRecoveryState(state)));
            MILR_STATUS_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn milr_state_load(
    path: *const c_char,
    out: *mut *mut MilrRecoveryState,
) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match load_sidecar(path) {
        Ok(state) => {
            *out = Box::into_raw(Box::new(MilrRecoveryState(state)));
            MILR_STATUS_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `state` must be live; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn milr_state_save(
    state: *const MilrRecoveryState,
    path: *const c_char,
) -> i32 {
    let Some(state) = state.as_ref() else {
        return null_arg("state");
    };
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match save_sidecar(&state.0, path) {
        Ok(()) => MILR_STATUS_OK,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `state` must be a handle from this library or null; it is consumed.
#[no_mangle]
pub unsafe extern "C" fn milr_state_free(state: *mut MilrRecoveryState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Sidecar storage footprint in bytes.
///
/// # Safety
/// `state` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn milr_state_cost_bytes(state: *const MilrRecoveryState) -> u64 {
    state.as_ref().map_or(0, |s| s.0.plan_cost_bytes)
}

/// Runs detection and writes the number of corrupted layers to
/// `corrupted_out` (0 means clean).
///
/// # Safety
/// `net` and `state` must be live; `corrupted_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn milr_detect(
    net: *const MilrNetwork,
    state: *const MilrRecoveryState,
    corrupted_out: *mut usize,
) -> i32 {
    let (Some(net), Some(state)) = (net.as_ref(), state.as_ref()) else {
        return null_arg("net/state");
    };
    if corrupted_out.is_null() {
        return null_arg("corrupted_out");
    }
    match detect(&net.0, &state.0) {
        Ok(log) => {
            *corrupted_out = log.entries.len();
            MILR_STATUS_OK
        }
        Err(e) => fail(e),
    }
}

/// Detects and heals corrupted layers in place, updating the state's
/// detection records for healed layers. Writes how many layers were fully
/// recovered and how many were degraded or failed.
///
/// # Safety
/// `net` and `state` must be live and mutable; the count pointers must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn milr_recover(
    net: *mut MilrNetwork,
    state: *mut MilrRecoveryState,
    recovered_out: *mut usize,
    failed_out: *mut usize,
) -> i32 {
    let (Some(net), Some(state)) = (net.as_mut(), state.as_mut()) else {
        return null_arg("net/state");
    };
    if recovered_out.is_null() || failed_out.is_null() {
        return null_arg("recovered_out/failed_out");
    }
    let log = match detect(&net.0, &state.0) {
        Ok(log) => log,
        Err(e) => return fail(e),
    };
    match recover(&mut net.0, &mut state.0, &log) {
        Ok(report) => {
            *recovered_out = report.recovered();
            *failed_out = report.degraded() + report.failed();
            MILR_STATUS_OK
        }
        Err(e) => fail(e),
    }
}

/// Flips each stored parameter bit independently with probability `rate`;
/// writes the number of flipped bits to `flips_out` (may be null).
///
/// # Safety
/// `net` must be live and mutable.
#[no_mangle]
pub unsafe extern "C" fn milr_inject_bitflips(
    net: *mut MilrNetwork,
    rate: f64,
    seed: u64,
    flips_out: *mut u64,
) -> i32 {
    let Some(net) = net.as_mut() else {
        return null_arg("net");
    };
    if !(0.0..=1.0).contains(&rate) {
        set_error("rate must lie in [0, 1]");
        return MILR_STATUS_DOMAIN;
    }
    let mut rng = SplitMix64::new(seed);
    let n = inject_bitflips(&mut net.0, rate, &mut rng).len() as u64;
    if !flips_out.is_null() {
        *flips_out = n;
    }
    MILR_STATUS_OK
}

/// Encodes a 32-bit word into a 39-bit SECDED codeword.
#[no_mangle]
pub extern "C" fn milr_secded_encode(data: u32) -> u64 {
    secded::encode(data)
}

/// Decodes a SECDED codeword. Returns 0 (clean), 1 (single error corrected),
/// or 2 (double error detected, data unreliable).
///
/// # Safety
/// `data_out` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn milr_secded_decode(code: u64, data_out: *mut u32) -> i32 {
    let (data, status) = secded::decode(code);
    if !data_out.is_null() {
        *data_out = data;
    }
    match status {
        secded::SecdedStatus::Clean => 0,
        secded::SecdedStatus::Corrected => 1,
        secded::SecdedStatus::DetectedUncorrectable => 2,
    }
}

#[allow(unused)]
fn assert_null_safe() {
    let _ = ptr::null::<MilrNetwork>();
}
