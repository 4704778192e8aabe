//! C ABI for the loop-closure engine.
//!
//! The engine is an opaque handle created from an optional TOML configuration
//! (the same schema the `bevloop` CLI accepts). Scans stream in as point
//! arrays or KITTI `.bin` files; each call runs the query-then-insert cycle
//! and fills a plain result struct. Every function returns a status code;
//! [`bevloop_last_error_message`] describes the most recent failure on the
//! calling thread.
//!
//! The generated header lives at `include/bevloop.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bevloop::bev::PointCloud;
use bevloop::cli::RunConfig;
use bevloop::dataset::read_scan_bin;
use bevloop::pipeline::Pipeline;

/// Status code returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BevloopStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was malformed (bad stride, non-UTF-8 path, ...).
    InvalidArgument = 2,
    /// The configuration text did not parse or validate.
    InvalidConfig = 3,
    /// A file could not be read or written.
    IoError = 4,
    /// An unexpected internal failure; see the last error message.
    InternalError = 5,
}

/// Opaque loop-closure engine: the pipeline plus its database and history.
pub struct BevloopEngine {
    pipeline: Pipeline,
}

/// Result of processing one scan. `has_loop` is 0 or 1; the remaining fields
/// are meaningful only when it is 1. The pose maps the candidate frame into
/// the query frame, meters and radians.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BevloopLoopResult {
    pub has_loop: u8,
    pub candidate_id: u64,
    pub score: f64,
    pub tx_m: f64,
    pub ty_m: f64,
    pub yaw_rad: f64,
}

impl BevloopLoopResult {
    fn none() -> Self {
        Self {
            has_loop: 0,
            candidate_id: 0,
            score: 0.0,
            tx_m: 0.0,
            ty_m: 0.0,
            yaw_rad: 0.0,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl AsRef<str>) {
    let sanitized = message.as_ref().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn guard<F: FnOnce() -> BevloopStatus>(body: F) -> BevloopStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            BevloopStatus::InternalError
        }
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bevloop_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn bevloop_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Create an engine. `config_toml` may be null for the default configuration,
/// or hold TOML text with the same schema as the CLI configuration file.
///
/// # Safety
/// `config_toml`, when non-null, must point to a NUL-terminated string;
/// `out_engine` must be a valid pointer. A returned engine must be released
/// with [`bevloop_engine_free`].
#[no_mangle]
pub unsafe extern "C" fn bevloop_engine_new(
    config_toml: *const c_char,
    out_engine: *mut *mut BevloopEngine,
) -> BevloopStatus {
    guard(|| {
        if out_engine.is_null() {
            set_error("out_engine is null");
            return BevloopStatus::NullPointer;
        }
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            let text = match unsafe { CStr::from_ptr(config_toml) }.to_str() {
                Ok(t) => t,
                Err(_) => {
                    set_error("config text is not valid UTF-8");
                    return BevloopStatus::InvalidArgument;
                }
            };
            match toml::from_str::<RunConfig>(text) {
                Ok(cfg) => cfg,
                Err(e) => {
                    set_error(format!("config parse error: {e}"));
                    return BevloopStatus::InvalidConfig;
                }
            }
        };
        if let Err(e) = cfg.bev.validate() {
            set_error(format!("invalid configuration: {e}"));
            return BevloopStatus::InvalidConfig;
        }
        let engine = Box::new(BevloopEngine {
            pipeline: Pipeline::new(cfg.pipeline_config()),
        });
        unsafe { *out_engine = Box::into_raw(engine) };
        BevloopStatus::Ok
    })
}

/// Release an engine created by [`bevloop_engine_new`]. A null pointer is
/// accepted and ignored.
///
/// # Safety
/// `engine` must be null or a pointer returned by [`bevloop_engine_new`]
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn bevloop_engine_free(engine: *mut BevloopEngine) {
    if !engine.is_null() {
        drop(unsafe { Box::from_raw(engine) });
    }
}

fn process_cloud(
    engine: &mut BevloopEngine,
    scan_id: u64,
    cloud: &PointCloud,
    out_result: *mut BevloopLoopResult,
) -> BevloopStatus {
    let (result, _) = engine.pipeline.process_scan(scan_id, cloud);
    let out = match result {
        Some(r) => BevloopLoopResult {
            has_loop: 1,
            candidate_id: r.candidate_id,
            score: r.score,
            tx_m: r.pose.t.x,
            ty_m: r.pose.t.y,
            yaw_rad: r.pose.theta,
        },
        None => BevloopLoopResult::none(),
    };
    unsafe { *out_result = out };
    BevloopStatus::Ok
}

/// Process one scan given as an interleaved float array. `stride_floats` is
/// the number of floats per point (at least 3); coordinates are read from the
/// first three slots of each point (sensor frame, meters).
///
/// # Safety
/// `engine` and `out_result` must be valid pointers; `points` must reference
/// at least `point_count * stride_floats` readable floats (it may be null
/// only when `point_count` is 0).
#[no_mangle]
pub unsafe extern "C" fn bevloop_engine_process_scan(
    engine: *mut BevloopEngine,
    scan_id: u64,
    points: *const f32,
    point_count: usize,
    stride_floats: usize,
    out_result: *mut BevloopLoopResult,
) -> BevloopStatus {
    guard(|| {
        if engine.is_null() || out_result.is_null() {
            set_error("engine or out_result is null");
            return BevloopStatus::NullPointer;
        }
        if point_count > 0 && points.is_null() {
            set_error("points is null but point_count is nonzero");
            return BevloopStatus::NullPointer;
        }
        if stride_floats < 3 {
            set_error(format!("stride_floats must be >= 3, got {stride_floats}"));
            return BevloopStatus::InvalidArgument;
        }
        let engine = unsafe { &mut *engine };
        let mut pts = Vec::with_capacity(point_count);
        if point_count > 0 {
            let slice = unsafe { std::slice::from_raw_parts(points, point_count * stride_floats) };
            for chunk in slice.chunks_exact(stride_floats) {
                pts.push([chunk[0] as f64, chunk[1] as f64, chunk[2] as f64]);
            }
        }
        process_cloud(engine, scan_id, &PointCloud::new(pts), out_result)
    })
}

/// Process one scan read from a KITTI-format `.bin` file.
///
/// # Safety
/// `engine` and `out_result` must be valid pointers; `path` must point to a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bevloop_engine_process_scan_file(
    engine: *mut BevloopEngine,
    scan_id: u64,
    path: *const c_char,
    out_result: *mut BevloopLoopResult,
) -> BevloopStatus {
    guard(|| {
        if engine.is_null() || path.is_null() || out_result.is_null() {
            set_error("engine, path, or out_result is null");
            return BevloopStatus::NullPointer;
        }
        let Ok(path) = unsafe { CStr::from_ptr(path) }.to_str() else {
            set_error("path is not valid UTF-8");
            return BevloopStatus::InvalidArgument;
        };
        let cloud = match read_scan_bin(Path::new(path)) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return BevloopStatus::IoError;
            }
        };
        let engine = unsafe { &mut *engine };
        process_cloud(engine, scan_id, &cloud, out_result)
    })
}

/// Number of scans processed so far.
///
/// # Safety
/// `engine` must be a valid engine pointer or null (null yields 0).
#[no_mangle]
pub unsafe extern "C" fn bevloop_engine_scan_count(engine: *const BevloopEngine) -> u64 {
    if engine.is_null() {
        return 0;
    }
    unsafe { &*engine }.pipeline.processed()
}

/// Write the retrieval database snapshot (little-endian, documented layout)
/// for warm restarts.
///
/// # Safety
/// `engine` must be a valid engine pointer; `path` must point to a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bevloop_engine_save_database(
    engine: *const BevloopEngine,
    path: *const c_char,
) -> BevloopStatus {
    guard(|| {
        if engine.is_null() || path.is_null() {
            set_error("engine or path is null");
            return BevloopStatus::NullPointer;
        }
        let Ok(path) = unsafe { CStr::from_ptr(path) }.to_str() else {
            set_error("path is not valid UTF-8");
            return BevloopStatus::InvalidArgument;
        };
        let engine = unsafe { &*engine };
        match engine.pipeline.database().save(Path::new(path)) {
            Ok(()) => BevloopStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                BevloopStatus::IoError
            }
        }
    })
}
