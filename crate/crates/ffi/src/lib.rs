//! C ABI over the `isql` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible call
//! returns an [`IsqlStatus`]; on failure the message is kept per thread and
//! read with [`isql_last_error_message`]. Strings returned by the library
//! are freed with [`isql_string_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use isql::cli::config::ExperimentConfig;
use isql::cli::serve::Service;
use isql::envs::{Environment, GridWorld, PointMass2D};
use isql::error::Error;
use isql::isql::TrainArtifact;
use isql::models::{DynamicsModel, LinearDynamics};
use isql::soft::State;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsqlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    HashMismatch = 6,
    Numerical = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Environment selector for [`isql_dynamics_real`].
pub const ISQL_ENV_GRID: u32 = 0;
pub const ISQL_ENV_POINTMASS: u32 = 1;

/// A training artifact loaded from disk.
pub struct IsqlArtifact(TrainArtifact);

/// A dynamics model: learned, real or user-specified.
pub struct IsqlDynamics(DynamicsModel);

/// An assist-session service speaking the line protocol.
pub struct IsqlService(Service);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IsqlStatus {
    match e {
        Error::InvalidInput(_) | Error::Session { .. } => IsqlStatus::InvalidArgument,
        Error::Io(_) => IsqlStatus::Io,
        Error::Json(_) | Error::Parse { .. } => IsqlStatus::Parse,
        Error::Config(_) => IsqlStatus::Config,
        Error::HashMismatch { .. } => IsqlStatus::HashMismatch,
        Error::Convergence { .. } | Error::Divergence { .. } | Error::InvariantViolation(_) => IsqlStatus::Numerical,
    }
}

struct Failure(IsqlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: IsqlStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IsqlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IsqlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            IsqlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(IsqlStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(IsqlStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(IsqlStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(IsqlStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(fail(IsqlStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn state_from(values: &[f64]) -> Result<State, Failure> {
    match values.len() {
        1 if values[0] >= 0.0 && values[0].fract() == 0.0 => Ok(State::Discrete(values[0] as usize)),
        4 => Ok(State::Continuous([values[0], values[1], values[2], values[3]])),
        n => Err(fail(
            IsqlStatus::InvalidArgument,
            format!("a state is one cell index or four reals, got {n} values"),
        )),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn isql_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bytes needed for the last error message on this thread, including the
/// terminating NUL; 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn isql_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes_with_nul().len()))
}

/// Copies the last error message into `buf`. Returns `BufferTooSmall`
/// (copying nothing) when `len` is under [`isql_last_error_length`].
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn isql_last_error_message(buf: *mut c_char, len: usize) -> IsqlStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    let Some(msg) = msg else {
        if !buf.is_null() && len > 0 {
            *buf = 0;
        }
        return IsqlStatus::Ok;
    };
    let bytes = msg.as_bytes_with_nul();
    if buf.is_null() {
        return IsqlStatus::NullPointer;
    }
    if len < bytes.len() {
        return IsqlStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
    IsqlStatus::Ok
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn isql_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| fail(IsqlStatus::InvalidArgument, "string holds a NUL byte"))
}

/// Loads an artifact, verifying its format and config hash.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn isql_artifact_load(path: *const c_char, out: *mut *mut IsqlArtifact) -> IsqlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let a = TrainArtifact::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(IsqlArtifact(a)));
        Ok(())
    })
}

/// Releases an artifact. Null is ignored.
///
/// # Safety
/// `artifact` must come from [`isql_artifact_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn isql_artifact_free(artifact: *mut IsqlArtifact) {
    if !artifact.is_null() {
        drop(Box::from_raw(artifact));
    }
}

/// Number of training tasks recorded in the artifact.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn isql_artifact_task_count(artifact: *const IsqlArtifact, out: *mut usize) -> IsqlStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(artifact, "artifact")?.0.task_ids.len();
        Ok(())
    })
}

/// The artifact's config hash as a new string (free with
/// [`isql_string_free`]).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn isql_artifact_config_hash(artifact: *const IsqlArtifact, out: *mut *mut c_char) -> IsqlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = into_c_string(ref_arg(artifact, "artifact")?.0.config_hash.clone())?;
        Ok(())
    })
}

/// Stored dynamics score; `InvalidArgument` when training had no truth.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn isql_artifact_dynamics_score(artifact: *const IsqlArtifact, out: *mut f64) -> IsqlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ref_arg(artifact, "artifact")?
            .0
            .dynamics_score()
            .ok_or_else(|| fail(IsqlStatus::InvalidArgument, "artifact has no dynamics score"))?;
        Ok(())
    })
}

/// The learned dynamics of an artifact as a new handle.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn isql_artifact_dynamics(artifact: *const IsqlArtifact, out: *mut *mut IsqlDynamics) -> IsqlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = ref_arg(artifact, "artifact")?.0.phi_model()?;
        *out = Box::into_raw(Box::new(IsqlDynamics(m)));
        Ok(())
    })
}

/// Linear point-mass dynamics from `[a13, a24, a33, a44, b11, b22, b31, b42]`.
///
/// # Safety
/// `params` must point to 8 doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn isql_dynamics_linear_new(params: *const f64, out: *mut *mut IsqlDynamics) -> IsqlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = slice_arg(params, 8, "params")?;
        let l = LinearDynamics::new(p.try_into().expect("eight values"))?;
        *out = Box::into_raw(Box::new(IsqlDynamics(DynamicsModel::Linear(l))));
        Ok(())
    })
}

/// Real dynamics of the default grid or point-mass environment.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn isql_dynamics_real(env: u32, out: *mut *mut IsqlDynamics) -> IsqlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = match env {
            ISQL_ENV_GRID => GridWorld::default().real_dynamics(),
            ISQL_ENV_POINTMASS => PointMass2D::default().real_dynamics(),
            _ => return Err(fail(IsqlStatus::InvalidArgument, format!("unknown environment {env}"))),
        };
        *out = Box::into_raw(Box::new(IsqlDynamics(m)));
        Ok(())
    })
}

/// Releases a dynamics handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn isql_dynamics_free(model: *mut IsqlDynamics) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected next state under `model`. A state is one cell index (grid) or
/// four reals `[x, y, vx, vy]`; `next` receives as many values as `state`.
///
/// # Safety
/// `state` and `next` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn isql_dynamics_expected_next(
    model: *const IsqlDynamics,
    state: *const f64,
    len: usize,
    action: usize,
    next: *mut f64,
) -> IsqlStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let s = state_from(slice_arg(state, len, "state")?)?;
        if next.is_null() {
            return Err(fail(IsqlStatus::NullPointer, "next is null"));
        }
        let out = std::slice::from_raw_parts_mut(next, len);
        out.fill(0.0);
        for (n, p) in isql::soft::TransitionModel::predict(m, &s, action)? {
            match n {
                State::Discrete(i) => out[0] += p * i as f64,
                State::Continuous(v) => out.iter_mut().zip(v).for_each(|(o, x)| *o += p * x),
            }
        }
        Ok(())
    })
}

/// Internal-to-real transfer: the real action whose outcome best matches
/// what the user expects from `user_action` under `phi`. `scores` receives
/// one divergence per action (lower is better) when non-null.
///
/// # Safety
/// `state` must hold `len` doubles, `scores` (if non-null) `scores_len`
/// doubles, and `executed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn isql_transfer_action(
    phi: *const IsqlDynamics,
    real: *const IsqlDynamics,
    state: *const f64,
    len: usize,
    user_action: usize,
    executed: *mut usize,
    scores: *mut f64,
    scores_len: usize,
) -> IsqlStatus {
    guard(|| {
        let phi = &ref_arg(phi, "phi")?.0;
        let real = &ref_arg(real, "real")?.0;
        let s = state_from(slice_arg(state, len, "state")?)?;
        let executed = out_arg(executed, "executed")?;
        let d = isql::transfer::transfer_action(phi, real, &s, user_action)?;
        if !scores.is_null() {
            if scores_len < d.scores.len() {
                return Err(fail(
                    IsqlStatus::BufferTooSmall,
                    format!("scores needs {} slots", d.scores.len()),
                ));
            }
            std::slice::from_raw_parts_mut(scores, d.scores.len()).copy_from_slice(&d.scores);
        }
        *executed = d.executed_action;
        Ok(())
    })
}

/// Builds a session service from a TOML config of kind `serve`.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn isql_service_new(config_toml: *const c_char, out: *mut *mut IsqlService) -> IsqlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = ExperimentConfig::from_toml(str_arg(config_toml, "config_toml")?)?;
        let s = Service::from_settings(&c.serve, c.grid, c.pointmass)?;
        *out = Box::into_raw(Box::new(IsqlService(s)));
        Ok(())
    })
}

/// Handles one protocol request line and returns the reply line (free with
/// [`isql_string_free`]). Protocol errors are replies, not failures.
///
/// # Safety
/// Pointers must be valid; `request` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn isql_service_handle(
    service: *const IsqlService,
    request: *const c_char,
    reply: *mut *mut c_char,
) -> IsqlStatus {
    guard(|| {
        let reply = out_arg(reply, "reply")?;
        let line = ref_arg(service, "service")?.0.handle_line(str_arg(request, "request")?);
        *reply = into_c_string(line)?;
        Ok(())
    })
}

/// Releases a service. Null is ignored.
///
/// # Safety
/// `service` must come from [`isql_service_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn isql_service_free(service: *mut IsqlService) {
    if !service.is_null() {
        drop(Box::from_raw(service));
    }
}
