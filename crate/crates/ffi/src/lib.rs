//! C ABI over `fibersim`.
//!
//! Every fallible call returns an [`FsStatus`]; on failure a message is
//! stored per thread and can be read with [`fs_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Panics never cross the boundary: they are caught and reported as
//! [`FsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fibersim::cli::run_checks;
use fibersim::config::{Component, ModeSpec, SimulationConfig};
use fibersim::solver::{observable_dofs, Simulator, Trajectory};
use fibersim::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Precondition = 4,
    NonConvergence = 5,
    BlowUp = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Internal = 10,
}

/// Opaque simulator built from a configuration text.
pub struct FsSimulator {
    inner: Simulator,
}

/// Opaque single-path trajectory.
pub struct FsTrajectory {
    inner: Trajectory,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> FsStatus {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) => FsStatus::InvalidArgument,
        Error::Config { .. } => FsStatus::Config,
        Error::Precondition(_) => FsStatus::Precondition,
        Error::NonConvergence { .. } => FsStatus::NonConvergence,
        Error::BlowUp { .. } => FsStatus::BlowUp,
        Error::Io(_) => FsStatus::Io,
        Error::Assembly(_) | Error::Json(_) => FsStatus::Internal,
    }
}

fn fail(status: FsStatus, msg: impl Into<String>) -> FsStatus {
    set_error(msg);
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guarded(f: impl FnOnce() -> Result<(), FsStatus>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(FsStatus::Panic, "panic inside fibersim"),
    }
}

fn lift<T>(r: fibersim::Result<T>) -> Result<T, FsStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, FsStatus> {
    if p.is_null() {
        return Err(fail(FsStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FsStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, FsStatus> {
    p.as_ref()
        .ok_or_else(|| fail(FsStatus::NullPointer, "null handle"))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses `config` (flat key=value text) and assembles a simulator.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_new(
    config: *const c_char,
    out: *mut *mut FsSimulator,
) -> FsStatus {
    guarded(|| {
        if out.is_null() {
            return Err(fail(FsStatus::NullPointer, "null output pointer"));
        }
        *out = ptr::null_mut();
        let cfg = lift(SimulationConfig::parse(text(config)?))?;
        let inner = lift(Simulator::new(&cfg))?;
        *out = Box::into_raw(Box::new(FsSimulator { inner }));
        Ok(())
    })
}

/// # Safety
/// `sim` must come from [`fs_simulator_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_free(sim: *mut FsSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Number of time points (steps + 1) and of grid nodes including s = 0.
///
/// # Safety
/// `sim` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_shape(
    sim: *const FsSimulator,
    time_points: *mut usize,
    nodes: *mut usize,
) -> FsStatus {
    guarded(|| {
        let s = handle(sim)?;
        if time_points.is_null() || nodes.is_null() {
            return Err(fail(FsStatus::NullPointer, "null output pointer"));
        }
        *time_points = s.inner.times().len();
        *nodes = s.inner.gram().grid.node_count();
        Ok(())
    })
}

/// Simulates sample path `path`. Paths with the same index and seed are
/// bitwise reproducible.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_simulator_run_path(
    sim: *const FsSimulator,
    path: u64,
    out: *mut *mut FsTrajectory,
) -> FsStatus {
    guarded(|| {
        let s = handle(sim)?;
        if out.is_null() {
            return Err(fail(FsStatus::NullPointer, "null output pointer"));
        }
        *out = ptr::null_mut();
        let inner = lift(s.inner.run_path(path))?;
        *out = Box::into_raw(Box::new(FsTrajectory { inner }));
        Ok(())
    })
}

/// # Safety
/// `traj` must come from [`fs_simulator_run_path`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_trajectory_free(traj: *mut FsTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Copies the state at time index `k`: node-major, three channels per node,
/// into `u` and `v` (each of length `len` >= nodes * 3), and its time into `t`.
///
/// # Safety
/// `traj` must be a live handle; `u` and `v` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_trajectory_state(
    traj: *const FsTrajectory,
    k: usize,
    t: *mut f64,
    u: *mut f64,
    v: *mut f64,
    len: usize,
) -> FsStatus {
    guarded(|| {
        let tr = handle(traj)?;
        if t.is_null() || u.is_null() || v.is_null() {
            return Err(fail(FsStatus::NullPointer, "null output pointer"));
        }
        if k >= tr.inner.len() {
            return Err(fail(
                FsStatus::InvalidArgument,
                format!("time index {k} out of range (len {})", tr.inner.len()),
            ));
        }
        let x = lift(tr.inner.state(k))?;
        let need = x.u.values().len() * 3;
        if len < need {
            return Err(fail(
                FsStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {need}"),
            ));
        }
        let u = std::slice::from_raw_parts_mut(u, need);
        let v = std::slice::from_raw_parts_mut(v, need);
        for (i, (a, b)) in x.u.values().iter().zip(x.v.values()).enumerate() {
            u[3 * i..3 * i + 3].copy_from_slice(a);
            v[3 * i..3 * i + 3].copy_from_slice(b);
        }
        *t = tr.inner.times[k];
        Ok(())
    })
}

/// Observable `⟨X(t_k), h⟩_H` for every time point, where `h` is the sine
/// mode `mode` in `channel` (1..=3) of the displacement (`component` 0) or
/// velocity (`component` 1).
///
/// # Safety
/// Both handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_trajectory_observe(
    sim: *const FsSimulator,
    traj: *const FsTrajectory,
    mode: usize,
    channel: usize,
    component: u32,
    out: *mut f64,
    len: usize,
) -> FsStatus {
    guarded(|| {
        let s = handle(sim)?;
        let tr = handle(traj)?;
        if out.is_null() {
            return Err(fail(FsStatus::NullPointer, "null output pointer"));
        }
        let component = match component {
            0 => Component::U,
            1 => Component::V,
            c => {
                return Err(fail(
                    FsStatus::InvalidArgument,
                    format!("component {c} is not 0 or 1"),
                ))
            }
        };
        let n = s.inner.config().n;
        if mode == 0 || mode > n || !(1..=3).contains(&channel) {
            return Err(fail(
                FsStatus::InvalidArgument,
                format!("need 1 <= mode <= {n} and 1 <= channel <= 3"),
            ));
        }
        if tr.inner.len() != s.inner.times().len() {
            return Err(fail(
                FsStatus::InvalidArgument,
                "trajectory from another simulator",
            ));
        }
        if len < tr.inner.len() {
            return Err(fail(
                FsStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", tr.inner.len()),
            ));
        }
        let spec = ModeSpec {
            mode,
            channel,
            component,
        };
        let h = observable_dofs(&s.inner.gram().grid, &spec);
        let vals = s.inner.observe(&tr.inner, &h);
        std::slice::from_raw_parts_mut(out, vals.len()).copy_from_slice(&vals);
        Ok(())
    })
}

/// Runs the invariant suite on `config`; writes the number of failed checks.
/// The status reports whether the suite could run, not whether it passed.
///
/// # Safety
/// `config` must be a NUL-terminated string; `failed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_verify(config: *const c_char, failed: *mut u32) -> FsStatus {
    guarded(|| {
        if failed.is_null() {
            return Err(fail(FsStatus::NullPointer, "null output pointer"));
        }
        let cfg = lift(SimulationConfig::parse(text(config)?))?;
        let checks = run_checks(&cfg);
        let bad: Vec<&str> = checks
            .iter()
            .filter(|c| c.status == fibersim::cli::CheckStatus::Fail)
            .map(|c| c.name.as_str())
            .collect();
        if !bad.is_empty() {
            set_error(format!("failed checks: {}", bad.join(", ")));
        }
        *failed = bad.len() as u32;
        Ok(())
    })
}
