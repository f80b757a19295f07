//! C ABI over the boosted-contrastive-learning core: opaque handles,
//! integer status codes, and a thread-local last-error message.
//!
//! The generated header lands in `include/bcl.h` at build time.

use bcl_core::augment::{self, AugPolicy, Image};
use bcl_core::dataio;
use bcl_core::memtrack::MemTable;
use bcl_core::trainer;
use bcl_core::Error;
use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BclStatus {
    Ok = 0,
    InvalidArgument = 1,
    RuntimeError = 2,
    IoError = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> BclStatus {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => BclStatus::InvalidArgument,
        Error::Io(_) => BclStatus::IoError,
        _ => BclStatus::RuntimeError,
    }
}

fn fail(err: Error) -> BclStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

fn guard(f: impl FnOnce() -> BclStatus) -> BclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            BclStatus::RuntimeError
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, BclStatus> {
    if ptr.is_null() {
        set_error("null string pointer");
        return Err(BclStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        BclStatus::InvalidArgument
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bcl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque per-sample loss table.
pub struct BclMemTable {
    inner: MemTable,
}

/// Create a loss table for `n` samples with smoothing factor `beta`.
///
/// # Safety
/// `out` must be a valid pointer to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn bcl_memtable_new(
    n: size_t,
    beta: f64,
    out: *mut *mut BclMemTable,
) -> BclStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return BclStatus::InvalidArgument;
        }
        match MemTable::new(n, beta) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(BclMemTable { inner }));
                BclStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a table handle. Null is a no-op.
///
/// # Safety
/// `table` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bcl_memtable_free(table: *mut BclMemTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Fold one epoch of per-sample losses (dense over sample ids 0..n).
///
/// # Safety
/// `losses` must point to `n` readable doubles; `table` must be live.
#[no_mangle]
pub unsafe extern "C" fn bcl_memtable_record_epoch(
    table: *mut BclMemTable,
    losses: *const f64,
    n: size_t,
) -> BclStatus {
    guard(|| {
        if table.is_null() || losses.is_null() {
            set_error("null pointer");
            return BclStatus::InvalidArgument;
        }
        let slice = std::slice::from_raw_parts(losses, n);
        match (*table).inner.record_epoch_losses(slice) {
            Ok(()) => BclStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Normalize momentum losses and copy the `n` scores into `out`.
///
/// # Safety
/// `out` must point to `n` writable doubles; `table` must be live.
#[no_mangle]
pub unsafe extern "C" fn bcl_memtable_scores(
    table: *mut BclMemTable,
    out: *mut f64,
    n: size_t,
) -> BclStatus {
    guard(|| {
        if table.is_null() || out.is_null() {
            set_error("null pointer");
            return BclStatus::InvalidArgument;
        }
        let t = &mut (*table).inner;
        if t.len() != n {
            set_error(&format!("table tracks {} samples, buffer holds {n}", t.len()));
            return BclStatus::InvalidArgument;
        }
        let scores = t.normalize_scores();
        std::ptr::copy_nonoverlapping(scores.as_ptr(), out, n);
        BclStatus::Ok
    })
}

/// Last folded epoch, or -1 before the first fold.
///
/// # Safety
/// `table` must be live.
#[no_mangle]
pub unsafe extern "C" fn bcl_memtable_epoch(table: *const BclMemTable) -> i64 {
    if table.is_null() {
        return -1;
    }
    match (*table).inner.epoch() {
        Some(e) => e as i64,
        None => -1,
    }
}

/// Persist the table to `path`.
///
/// # Safety
/// `table` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bcl_memtable_save(
    table: *const BclMemTable,
    path: *const c_char,
) -> BclStatus {
    guard(|| {
        if table.is_null() {
            set_error("null table");
            return BclStatus::InvalidArgument;
        }
        let path = match cstr(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match (*table).inner.save(Path::new(path)) {
            Ok(()) => BclStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Load a table from `path`. `expect_n = 0` skips the sample-count check.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bcl_memtable_load(
    path: *const c_char,
    expect_n: size_t,
    out: *mut *mut BclMemTable,
) -> BclStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return BclStatus::InvalidArgument;
        }
        let path = match cstr(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        let expect = if expect_n == 0 { None } else { Some(expect_n) };
        match MemTable::load(Path::new(path), expect) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(BclMemTable { inner }));
                BclStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Closed-form long-tailed class counts for `classes` classes under the
/// given imbalance factor, written into `out_counts`.
///
/// # Safety
/// `out_counts` must point to `classes` writable size_t slots.
#[no_mangle]
pub unsafe extern "C" fn bcl_long_tailed_counts(
    n_max: size_t,
    classes: size_t,
    imbalance: f64,
    out_counts: *mut size_t,
) -> BclStatus {
    guard(|| {
        if out_counts.is_null() {
            set_error("null output buffer");
            return BclStatus::InvalidArgument;
        }
        match dataio::long_tailed_counts(n_max, classes, imbalance) {
            Ok(counts) => {
                for (i, c) in counts.iter().enumerate() {
                    *out_counts.add(i) = *c;
                }
                BclStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Apply score-boosted augmentation in place to an interleaved HWC RGB
/// buffer: `k` ops drawn without replacement, each triggering with
/// probability `score` at strength `score * U(0,1)`. The stream is keyed
/// by (seed, sample_id, epoch, view), matching the training pipeline.
///
/// # Safety
/// `pixels` must point to `height * width * 3` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bcl_boosted_augment(
    pixels: *mut u8,
    height: size_t,
    width: size_t,
    score: f64,
    k: size_t,
    seed: u64,
    sample_id: u32,
    epoch: u64,
    view: u32,
) -> BclStatus {
    guard(|| {
        if pixels.is_null() || height == 0 || width == 0 {
            set_error("null or empty image");
            return BclStatus::InvalidArgument;
        }
        let len = height * width * 3;
        let buf = std::slice::from_raw_parts_mut(pixels, len);
        let img = Image::new(height, width, buf.to_vec());
        let policy = match AugPolicy::new(k) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        let fill = img.mean_rgb();
        let mut rng = augment::view_stream(seed, sample_id, epoch, view);
        match augment::boosted_augment(&img, score, &policy, fill, &mut rng) {
            Ok((out, _)) => {
                buf.copy_from_slice(&out.pixels);
                BclStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Run a full pretraining job from a JSON config file (same schema as the
/// `bcl pretrain` subcommand; the run directory comes from the config).
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bcl_run_pretrain(config_path: *const c_char) -> BclStatus {
    guard(|| {
        let path = match cstr(config_path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        let cfg = match trainer::load_config(Path::new(path), &[]) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        if let Err(e) = std::fs::create_dir_all(&cfg.out_dir) {
            return fail(Error::Io(e));
        }
        let snapshot = cfg.out_dir.join("config.resolved.json");
        match serde_json::to_string_pretty(&cfg) {
            Ok(text) => {
                if let Err(e) = std::fs::write(&snapshot, text) {
                    return fail(Error::Io(e));
                }
            }
            Err(e) => return fail(Error::Json(e)),
        }
        match trainer::pretrain(&cfg) {
            Ok(_) => BclStatus::Ok,
            Err(e) => fail(e),
        }
    })
}
