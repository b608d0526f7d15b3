//! C ABI over the statesynth compiler.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns an
//! [`SsStatus`]; on failure [`ss_last_error`] describes what went wrong on
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use statesynth::cli::{self, CliError, ProjectConfig};
use statesynth::elaborate::latency;
use statesynth::fixed::FixedPointFormat;
use statesynth::model::StateSpaceModel;
use statesynth::nn::{build_state_space, load_weights, random_nn};
use statesynth::sim::fixed::{FixedProgram, FormatAssignment};
use statesynth::sim::reference::simulate_reference;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    Validation = 1,
    Infeasible = 2,
    Gate = 3,
    Io = 4,
    /// Null pointer, bad UTF-8, out-of-range index or wrong buffer length.
    InvalidArgument = 5,
    /// A panic was caught at the boundary.
    Internal = 6,
}

/// A state-space model.
pub struct SsModel {
    inner: StateSpaceModel,
}

/// The result of a successful compile: emitted files plus summary numbers.
pub struct SsProject {
    files: Vec<(CString, CString)>,
    latency: usize,
    clock_ratio: usize,
    registers: usize,
    project: statesynth::verilog::VerilogProject,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: SsStatus, msg: impl AsRef<str>) -> SsStatus {
    set_error(msg.as_ref());
    status
}

fn from_cli(e: CliError) -> SsStatus {
    let status = match e {
        CliError::Validation(_) => SsStatus::Validation,
        CliError::Infeasible(_) => SsStatus::Infeasible,
        CliError::Gate(_) => SsStatus::Gate,
        CliError::Io(_) => SsStatus::Io,
        CliError::Usage(_) => SsStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> SsStatus) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SsStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SsStatus> {
    if p.is_null() {
        return Err(fail(SsStatus::InvalidArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(SsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn put<T>(out: *mut *mut T, v: T) -> SsStatus {
    if out.is_null() {
        return fail(SsStatus::InvalidArgument, "output handle pointer is null");
    }
    unsafe { *out = Box::into_raw(Box::new(v)) };
    SsStatus::Ok
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model from a weights-file JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_from_weights_json(json: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let text = match str_arg(json, "json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match load_weights(text).and_then(|nn| build_state_space(&nn)) {
            Ok(m) => put(out, SsModel { inner: m }),
            Err(e) => fail(SsStatus::Validation, e.to_string()),
        }
    })
}

/// Loads a weights file or a serialized state-space model from disk.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let p = match str_arg(path, "path") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match cli::load_model(Path::new(p)) {
            Ok(m) => put(out, SsModel { inner: m }),
            Err(e) => from_cli(e),
        }
    })
}

/// Seeded random network with `l` inputs, `n` layers of `m` nodes and `p`
/// outputs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_random_nn(
    l: usize,
    n: usize,
    m: usize,
    p: usize,
    seed: u64,
    out: *mut *mut SsModel,
) -> SsStatus {
    guard(|| {
        if [l, n, m, p].contains(&0) {
            return fail(SsStatus::InvalidArgument, "dimensions must be at least 1");
        }
        match build_state_space(&random_nn(l, n, m, p, seed)) {
            Ok(model) => put(out, SsModel { inner: model }),
            Err(e) => fail(SsStatus::Validation, e.to_string()),
        }
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input, state and output dimensions and the horizon. Any out pointer may
/// be null.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_model_dims(
    model: *const SsModel,
    input: *mut usize,
    state: *mut usize,
    output: *mut usize,
    horizon: *mut usize,
) -> SsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SsStatus::InvalidArgument, "model is null");
        };
        let m = &m.inner;
        for (p, v) in [(input, m.input_dim), (state, m.state_dim), (output, m.output_dim), (horizon, m.horizon)] {
            if !p.is_null() {
                *p = v;
            }
        }
        SsStatus::Ok
    })
}

unsafe fn io_slices<'a>(
    m: &StateSpaceModel,
    u: *const f64,
    u_len: usize,
    y: *mut f64,
    y_len: usize,
) -> Result<(&'a [f64], &'a mut [f64]), SsStatus> {
    if u.is_null() || y.is_null() {
        return Err(fail(SsStatus::InvalidArgument, "buffer is null"));
    }
    if u_len != m.input_dim || y_len != m.output_dim {
        return Err(fail(
            SsStatus::InvalidArgument,
            format!("buffers hold {u_len} inputs and {y_len} outputs, model has {} and {}", m.input_dim, m.output_dim),
        ));
    }
    Ok((std::slice::from_raw_parts(u, u_len), std::slice::from_raw_parts_mut(y, y_len)))
}

/// Double-precision reference output for one input vector.
///
/// # Safety
/// `model` must be live; `u` must hold `u_len` values and `y` `y_len`.
#[no_mangle]
pub unsafe extern "C" fn ss_simulate_reference(
    model: *const SsModel,
    u: *const f64,
    u_len: usize,
    y: *mut f64,
    y_len: usize,
) -> SsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SsStatus::InvalidArgument, "model is null");
        };
        let (u, y) = match io_slices(&m.inner, u, u_len, y, y_len) {
            Ok(b) => b,
            Err(s) => return s,
        };
        match simulate_reference(&m.inner, u) {
            Ok(v) => {
                y.copy_from_slice(&v);
                SsStatus::Ok
            }
            Err(e) => fail(SsStatus::Validation, e.to_string()),
        }
    })
}

/// Bit-accurate output with every datapath class in Q(`word`, `frac`) and
/// the default activation table; values returned as reals.
///
/// # Safety
/// As for [`ss_simulate_reference`].
#[no_mangle]
pub unsafe extern "C" fn ss_simulate_fixed(
    model: *const SsModel,
    word: u32,
    frac: u32,
    u: *const f64,
    u_len: usize,
    y: *mut f64,
    y_len: usize,
) -> SsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SsStatus::InvalidArgument, "model is null");
        };
        let (u, y) = match io_slices(&m.inner, u, u_len, y, y_len) {
            Ok(b) => b,
            Err(s) => return s,
        };
        let f = match FixedPointFormat::new(word, frac) {
            Ok(f) => f,
            Err(e) => return fail(SsStatus::Validation, e.to_string()),
        };
        let fmts = FormatAssignment::uniform(f);
        let lut = match cli::model_lut(&m.inner, &fmts, &Default::default()) {
            Ok(l) => l,
            Err(e) => return from_cli(e),
        };
        let res = FixedProgram::new(&m.inner, &fmts, lut.as_ref()).and_then(|p| p.run(u));
        match res {
            Ok(v) => {
                for (d, s) in y.iter_mut().zip(&v) {
                    *d = s.to_f64();
                }
                SsStatus::Ok
            }
            Err(e) => fail(SsStatus::Validation, e.to_string()),
        }
    })
}

/// Runs the full compile flow on a project configuration document.
/// Relative paths in it resolve against `base_dir` (the working directory
/// when null). Nothing is written to disk; see [`ss_project_write`].
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_compile(
    config_json: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut SsProject,
) -> SsStatus {
    guard(|| {
        let text = match str_arg(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let base = if base_dir.is_null() {
            PathBuf::new()
        } else {
            match str_arg(base_dir, "base_dir") {
                Ok(b) => PathBuf::from(b),
                Err(s) => return s,
            }
        };
        let mut cfg = match ProjectConfig::parse(text) {
            Ok(c) => c,
            Err(e) => return from_cli(e),
        };
        cfg.model = base.join(&cfg.model);
        let c = match cli::compile(&cfg) {
            Ok(c) => c,
            Err(e) => return from_cli(e),
        };
        let files = c
            .project
            .sources
            .iter()
            .chain(&c.project.data)
            .map(|f| {
                (CString::new(f.name.as_str()).unwrap_or_default(), CString::new(f.text.as_str()).unwrap_or_default())
            })
            .collect();
        put(
            out,
            SsProject {
                files,
                latency: latency(&c.netlist),
                clock_ratio: c.netlist.meta.clock_ratio,
                registers: c.netlist.register_count(),
                project: c.project,
            },
        )
    })
}

/// # Safety
/// `project` must come from [`ss_compile`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ss_project_free(project: *mut SsProject) {
    if !project.is_null() {
        drop(Box::from_raw(project));
    }
}

/// Number of emitted files (Verilog sources first, then data files).
///
/// # Safety
/// `project` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn ss_project_file_count(project: *const SsProject) -> usize {
    project.as_ref().map_or(0, |p| p.files.len())
}

/// File name at `index`, or null when out of range. Owned by the project.
///
/// # Safety
/// `project` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn ss_project_file_name(project: *const SsProject, index: usize) -> *const c_char {
    project.as_ref().and_then(|p| p.files.get(index)).map_or(std::ptr::null(), |f| f.0.as_ptr())
}

/// File contents at `index`, or null when out of range. Owned by the project.
///
/// # Safety
/// `project` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn ss_project_file_text(project: *const SsProject, index: usize) -> *const c_char {
    project.as_ref().and_then(|p| p.files.get(index)).map_or(std::ptr::null(), |f| f.1.as_ptr())
}

/// Latency, clock ratio and register count of the compiled netlist. Any out
/// pointer may be null.
///
/// # Safety
/// `project` must be live.
#[no_mangle]
pub unsafe extern "C" fn ss_project_summary(
    project: *const SsProject,
    latency: *mut usize,
    clock_ratio: *mut usize,
    registers: *mut usize,
) -> SsStatus {
    guard(|| {
        let Some(p) = project.as_ref() else {
            return fail(SsStatus::InvalidArgument, "project is null");
        };
        for (d, v) in [(latency, p.latency), (clock_ratio, p.clock_ratio), (registers, p.registers)] {
            if !d.is_null() {
                *d = v;
            }
        }
        SsStatus::Ok
    })
}

/// Writes every file into `dir`, creating it if needed.
///
/// # Safety
/// `project` must be live; `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ss_project_write(project: *const SsProject, dir: *const c_char) -> SsStatus {
    guard(|| {
        let Some(p) = project.as_ref() else {
            return fail(SsStatus::InvalidArgument, "project is null");
        };
        let d = match str_arg(dir, "dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        match p.project.write(Path::new(d)) {
            Ok(_) => SsStatus::Ok,
            Err(e) => fail(SsStatus::Io, format!("{d}: {e}")),
        }
    })
}
