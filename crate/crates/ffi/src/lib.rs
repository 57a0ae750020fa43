//! C ABI over the simulator. Handles are opaque; every fallible call returns a
//! [`FedalsStatus`] and leaves a message retrievable with
//! [`fedals_last_error`]. Strings returned through out-pointers are owned by
//! the caller and released with [`fedals_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fedals::bound::{verify_one_round_bound, BoundTrialConfig};
use fedals::cli::run_seed;
use fedals::config::ExperimentConfig;
use fedals::engine::{comm_closed_form, sync_due, AlgoKind, ScheduleSpec};
use fedals::params::{BlockLayout, Role};
use fedals::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedalsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    Diverged = 4,
    InsufficientTrials = 5,
    Failed = 6,
    Panic = 7,
}

/// A parsed experiment configuration plus the metrics of its last run.
pub struct FedalsExperiment {
    config: ExperimentConfig,
    last_metrics: String,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> FedalsStatus {
    match err {
        Error::Diverged { .. } => FedalsStatus::Diverged,
        Error::InsufficientTrials { .. } => FedalsStatus::InsufficientTrials,
        Error::Config(_)
        | Error::InvalidSchedule(_)
        | Error::InvalidParticipation(_)
        | Error::InvalidLayout(_)
        | Error::InvalidGenerator(_)
        | Error::InvalidCovariance(_)
        | Error::BatchOverflow { .. } => FedalsStatus::InvalidConfig,
        _ => FedalsStatus::Failed,
    }
}

fn guard(f: impl FnOnce() -> Result<(), FedalsStatus>) -> FedalsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedalsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            FedalsStatus::Panic
        }
    }
}

fn fail(err: Error) -> FedalsStatus {
    set_error(&err.to_string());
    status_of(&err)
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, FedalsStatus> {
    if p.is_null() {
        set_error("null pointer argument");
        return Err(FedalsStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        FedalsStatus::InvalidUtf8
    })
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), FedalsStatus> {
    if out.is_null() {
        set_error("null output pointer");
        return Err(FedalsStatus::NullPointer);
    }
    *out = CString::new(s).map_err(|_| FedalsStatus::Failed)?.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread. Valid until the next call
/// into the library from the same thread; never null.
#[no_mangle]
pub extern "C" fn fedals_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn fedals_version() -> *const c_char {
    static V: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();
    V.as_ptr().cast()
}

/// Parse a TOML experiment configuration into a new handle.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedals_experiment_new(
    config_toml: *const c_char,
    out: *mut *mut FedalsExperiment,
) -> FedalsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return Err(FedalsStatus::NullPointer);
        }
        let text = read_str(config_toml)?;
        let config = ExperimentConfig::from_toml(text).map_err(fail)?;
        *out = Box::into_raw(Box::new(FedalsExperiment { config, last_metrics: String::new() }));
        Ok(())
    })
}

/// Run one seed. On success `summary_json` receives the run summary and the
/// metrics rows become available through [`fedals_experiment_metrics`].
///
/// # Safety
/// `exp` must come from [`fedals_experiment_new`]; `summary_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedals_experiment_run(
    exp: *mut FedalsExperiment,
    seed: u64,
    workers: usize,
    summary_json: *mut *mut c_char,
) -> FedalsStatus {
    guard(|| {
        let exp = exp.as_mut().ok_or_else(|| {
            set_error("null experiment handle");
            FedalsStatus::NullPointer
        })?;
        let mut rows = String::new();
        let summary = run_seed(&exp.config, seed, workers.max(1), &mut |r| {
            rows.push_str(&serde_json::to_string(r).expect("serializable row"));
            rows.push('\n');
        })
        .map_err(fail)?;
        exp.last_metrics = rows;
        write_string(summary_json, serde_json::to_string(&summary).map_err(|_| FedalsStatus::Failed)?)
    })
}

/// JSONL metrics rows of the last successful run.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedals_experiment_metrics(
    exp: *const FedalsExperiment,
    out: *mut *mut c_char,
) -> FedalsStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| {
            set_error("null experiment handle");
            FedalsStatus::NullPointer
        })?;
        write_string(out, exp.last_metrics.clone())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `exp` must come from [`fedals_experiment_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedals_experiment_free(exp: *mut FedalsExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Run the bound check for a JSON-encoded trial configuration. `pass`
/// receives the verdict and `report_json` the full report.
///
/// # Safety
/// `config_json` must be NUL-terminated; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedals_verify_bound(
    config_json: *const c_char,
    pass: *mut bool,
    report_json: *mut *mut c_char,
) -> FedalsStatus {
    guard(|| {
        if pass.is_null() {
            set_error("null output pointer");
            return Err(FedalsStatus::NullPointer);
        }
        let text = read_str(config_json)?;
        let cfg: BoundTrialConfig = serde_json::from_str(text).map_err(|e| fail(Error::Config(e.to_string())))?;
        let report = verify_one_round_bound(&cfg).map_err(fail)?;
        *pass = report.pass;
        write_string(report_json, serde_json::to_string(&report).map_err(|_| FedalsStatus::Failed)?)
    })
}

/// Parameters communicated per client per direction over `rounds` rounds for
/// a layout with `representation` and `head` parameters.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedals_comm_count(
    tau: usize,
    alpha: usize,
    rounds: usize,
    representation: usize,
    head: usize,
    adaptive: bool,
    out: *mut u64,
) -> FedalsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return Err(FedalsStatus::NullPointer);
        }
        let schedule = ScheduleSpec { tau, alpha, eta: 0.0, rounds, batch_size: 1, sampling: Default::default() };
        schedule.validate().map_err(fail)?;
        let layout = BlockLayout::from_sizes([
            ("representation", representation, Role::Representation),
            ("head", head, Role::Head),
        ])
        .map_err(fail)?;
        let algo = if adaptive { AlgoKind::FedAls } else { AlgoKind::FedAvg };
        *out = comm_closed_form(algo, &schedule, &layout, 1).uploaded_per_client;
        Ok(())
    })
}

/// Whether head (`head = true`) or representation blocks sync after global
/// step `step`. Returns false for invalid schedules.
#[no_mangle]
pub extern "C" fn fedals_sync_due(step: usize, tau: usize, alpha: usize, head: bool) -> bool {
    if tau == 0 || alpha == 0 {
        return false;
    }
    let schedule = ScheduleSpec { tau, alpha, eta: 0.0, rounds: 1, batch_size: 1, sampling: Default::default() };
    sync_due(step, if head { Role::Head } else { Role::Representation }, &schedule)
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedals_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
