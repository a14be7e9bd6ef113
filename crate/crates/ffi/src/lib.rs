//! C ABI over mmlab.
//!
//! Datasets and finished runs are opaque handles owned by the caller and
//! released with their `_free` function. Every fallible call returns an
//! [`MmlabStatus`]; on failure the message is available from
//! [`mmlab_last_error`] on the same thread. Strings returned through out
//! pointers must be released with [`mmlab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mmlab::diagnose::HBarSource;
use mmlab::harness::{run_training, save_checkpoint, RunRecord};
use mmlab::synthdata::{gen_duplicated, gen_shortcut_bimodal, load_dataset, save_dataset, BimodalDataset, GeneratorSpec, Modality};
use mmlab::trainers::{TrainConfig, TrainState};
use mmlab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmlabStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Panic = 7,
}

/// Which modality fills both slots in [`mmlab_dataset_generate`].
pub const MMLAB_DUPLICATE_NONE: i32 = -1;
pub const MMLAB_DUPLICATE_M0: i32 = 0;
pub const MMLAB_DUPLICATE_M1: i32 = 1;

/// Split selector for [`mmlab_dataset_len`].
pub const MMLAB_SPLIT_TRAIN: i32 = 0;
pub const MMLAB_SPLIT_VAL: i32 = 1;
pub const MMLAB_SPLIT_TEST: i32 = 2;

pub struct MmlabDataset {
    inner: BimodalDataset,
}

pub struct MmlabRun {
    state: TrainState,
    record: RunRecord,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MmlabStatus {
    match e {
        Error::Config(_) | Error::MissingInput(_) | Error::LabelOutOfRange { .. } => MmlabStatus::Config,
        Error::Io { .. } => MmlabStatus::Io,
        Error::VersionMismatch { .. } | Error::Checksum(_) | Error::Corrupt { .. } | Error::Json(_) => MmlabStatus::Format,
        _ => MmlabStatus::Numeric,
    }
}

struct Fail(MmlabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Run `f`, translating errors and panics into a status and the
/// thread's last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MmlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmlabStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            MmlabStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(MmlabStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MmlabStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(MmlabStatus::NullArgument, format!("{what} is null")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(MmlabStatus::NullArgument, format!("{what} is null")));
    }
    Ok(())
}

fn parse_json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, Fail> {
    serde_json::from_str(s).map_err(|e| Fail(MmlabStatus::Config, format!("{what}: {e}")))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mmlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mmlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn mmlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generate a dataset from a JSON generator spec (missing fields take
/// their defaults; `"{}"` is valid).
///
/// # Safety
/// `spec_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmlab_dataset_generate(spec_json: *const c_char, duplicate: i32, out: *mut *mut MmlabDataset) -> MmlabStatus {
    guard(|| {
        out_arg(out, "out")?;
        let spec: GeneratorSpec = parse_json(str_arg(spec_json, "spec_json")?, "generator spec")?;
        let inner = match duplicate {
            MMLAB_DUPLICATE_NONE => gen_shortcut_bimodal(&spec)?,
            MMLAB_DUPLICATE_M0 => gen_duplicated(&spec, Modality::M0)?,
            MMLAB_DUPLICATE_M1 => gen_duplicated(&spec, Modality::M1)?,
            d => return Err(Fail(MmlabStatus::Config, format!("unknown duplicate selector {d}"))),
        };
        *out = Box::into_raw(Box::new(MmlabDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmlab_dataset_load(dir: *const c_char, out: *mut *mut MmlabDataset) -> MmlabStatus {
    guard(|| {
        out_arg(out, "out")?;
        let inner = load_dataset(Path::new(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(MmlabDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn mmlab_dataset_save(ds: *const MmlabDataset, dir: *const c_char) -> MmlabStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        save_dataset(&ds.inner, Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Number of samples in a split, or 0 for a null handle or unknown split.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn mmlab_dataset_len(ds: *const MmlabDataset, split: i32) -> usize {
    let Some(ds) = ds.as_ref() else { return 0 };
    match split {
        MMLAB_SPLIT_TRAIN => ds.inner.train.len(),
        MMLAB_SPLIT_VAL => ds.inner.val.len(),
        MMLAB_SPLIT_TEST => ds.inner.test.len(),
        _ => 0,
    }
}

/// Content identifier of the dataset; free with [`mmlab_string_free`].
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmlab_dataset_id(ds: *const MmlabDataset, out: *mut *mut c_char) -> MmlabStatus {
    guard(|| {
        out_arg(out, "out")?;
        let ds = ref_arg(ds, "dataset")?;
        *out = CString::new(ds.inner.id()).unwrap_or_default().into_raw();
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmlab_dataset_free(ds: *mut MmlabDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Train one run to completion and diagnose its best checkpoint.
/// `config_json` is a training config (missing fields take defaults).
/// A diverged run still yields a handle; its record carries the failure.
///
/// # Safety
/// `ds` must be a live dataset handle; `config_json` NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mmlab_train(ds: *const MmlabDataset, config_json: *const c_char, out: *mut *mut MmlabRun) -> MmlabStatus {
    guard(|| {
        out_arg(out, "out")?;
        let ds = ref_arg(ds, "dataset")?;
        let cfg: TrainConfig = parse_json(str_arg(config_json, "config_json")?, "training config")?;
        let (state, record) = run_training(&ds.inner, None, &cfg, HBarSource::Recomputed)?;
        *out = Box::into_raw(Box::new(MmlabRun { state, record }));
        Ok(())
    })
}

/// The run's record as JSON; free with [`mmlab_string_free`].
///
/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmlab_run_record_json(run: *const MmlabRun, out: *mut *mut c_char) -> MmlabStatus {
    guard(|| {
        out_arg(out, "out")?;
        let run = ref_arg(run, "run")?;
        let s = serde_json::to_string(&run.record).map_err(Error::from)?;
        *out = CString::new(s).unwrap_or_default().into_raw();
        Ok(())
    })
}

/// Validation-selected test accuracy; NaN when the run produced none.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn mmlab_run_test_accuracy(run: *const MmlabRun) -> f64 {
    run.as_ref().and_then(|r| r.record.test_acc).unwrap_or(f64::NAN)
}

/// Diff_util of the best checkpoint; NaN when undefined.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn mmlab_run_diff_util(run: *const MmlabRun) -> f64 {
    run.as_ref().and_then(|r| r.record.diff_util).unwrap_or(f64::NAN)
}

/// # Safety
/// `run` must be a live run handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn mmlab_run_save_checkpoint(run: *const MmlabRun, dir: *const c_char) -> MmlabStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        save_checkpoint(&run.state, Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmlab_run_free(run: *mut MmlabRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
