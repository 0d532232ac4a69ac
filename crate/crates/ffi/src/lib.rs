//! C ABI over `trajcal`.
//!
//! Pointer contract for every function: pointer arguments are either null
//! (rejected with `TRAJCAL_STATUS_NULL_POINTER` unless documented as
//! optional) or valid for the stated number of elements; strings are
//! NUL-terminated UTF-8. Handles returned through `out` parameters are owned
//! by the caller and released with the matching `_free` function.
//!
//! On any status other than `TRAJCAL_STATUS_OK`, a message is available from
//! `trajcal_last_error_message` on the same thread.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use trajcal::calibration::{
    fit_dirichlet, fit_temperature, softmax, CalibrationFile, LabeledLogits, OptimizerConfig, RegularizerConfig,
};
use trajcal::data_model::{average_logits, load_trajectories, TrajectoryStore};
use trajcal::fusion::fuse_vectors;
use trajcal::metrics::{evaluate, read_predictions, PredictionSet, SelectiveConfig};
use trajcal::pipeline::{calibrate, run_pipeline, CalibrationKind, PipelineConfig};
use trajcal::pseudo_label::{make_pseudo_labels, write_pseudo_labels, Method};
use trajcal::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajcalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Data = 5,
    Config = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajcalMethod {
    Onehot = 0,
    Rt4u = 1,
    PseudoT = 2,
    PseudoD = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajcalCalibrationKind {
    Temperature = 0,
    Dirichlet = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrajcalMetrics {
    pub balanced_accuracy: f64,
    pub balanced_mae: f64,
    pub balanced_ece: f64,
    pub aurc: f64,
}

pub struct TrajcalStore(TrajectoryStore);
pub struct TrajcalCalibration(CalibrationFile);
pub struct TrajcalPredictions(PredictionSet);

struct Fail(TrajcalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => TrajcalStatus::Io,
            Error::Parse { .. } => TrajcalStatus::Parse,
            Error::Data(_) => TrajcalStatus::Data,
            Error::Config(_) => TrajcalStatus::Config,
            Error::Usage(_) => TrajcalStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TrajcalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TrajcalStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".to_string());
            TrajcalStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TrajcalStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(TrajcalStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn copy_into(dst: &mut [f64], src: &[f64]) -> Result<(), Fail> {
    if dst.len() != src.len() {
        return Err(invalid(format!("output has length {}, expected {}", dst.len(), src.len())));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Row-major `n x c` logits plus `n` labels.
unsafe fn labeled(logits: *const f64, labels: *const usize, n: usize, c: usize) -> Result<Vec<LabeledLogits>, Fail> {
    let total = n.checked_mul(c).ok_or_else(|| invalid("n * num_classes overflows"))?;
    let logits = slice_arg(logits, total, "logits")?;
    let labels = slice_arg(labels, n, "labels")?;
    Ok(logits
        .chunks_exact(c.max(1))
        .zip(labels)
        .map(|(row, &y)| LabeledLogits::new(row.to_vec(), y))
        .collect())
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn trajcal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn trajcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes softmax(`logits`) into `out`; both have `num_classes` entries.
#[no_mangle]
pub unsafe extern "C" fn trajcal_softmax(logits: *const f64, num_classes: usize, out: *mut f64) -> TrajcalStatus {
    guard(|| {
        let z = slice_arg(logits, num_classes, "logits")?;
        let out = slice_out(out, num_classes, "out")?;
        copy_into(out, &softmax(z)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_store_load(path: *const c_char, out: *mut *mut TrajcalStore) -> TrajcalStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, TrajcalStore(load_trajectories(&PathBuf::from(path))?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_store_free(store: *mut TrajcalStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of samples; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn trajcal_store_num_samples(store: *const TrajcalStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_store_num_classes(store: *const TrajcalStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.num_classes())
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_store_num_epochs(store: *const TrajcalStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.num_epochs())
}

/// Logits of `sample_id` averaged over every recorded epoch.
#[no_mangle]
pub unsafe extern "C" fn trajcal_store_average_logits(
    store: *const TrajcalStore,
    sample_id: *const c_char,
    out: *mut f64,
    len: usize,
) -> TrajcalStatus {
    guard(|| {
        let store = &ref_arg(store, "store")?.0;
        let id = str_arg(sample_id, "sample_id")?;
        let out = slice_out(out, len, "out")?;
        copy_into(out, &average_logits(store, id, None)?)
    })
}

/// Fits a calibration map on the epoch-averaged validation logits of a
/// store with the default optimizer. The lambdas apply to Dirichlet only.
#[no_mangle]
pub unsafe extern "C" fn trajcal_store_calibrate(
    store: *const TrajcalStore,
    kind: TrajcalCalibrationKind,
    lambda1: f64,
    lambda2: f64,
    out: *mut *mut TrajcalCalibration,
) -> TrajcalStatus {
    guard(|| {
        let store = &ref_arg(store, "store")?.0;
        let reg = RegularizerConfig { lambda1, lambda2 };
        reg.validate()?;
        let kind = match kind {
            TrajcalCalibrationKind::Temperature => CalibrationKind::Temperature,
            TrajcalCalibrationKind::Dirichlet => CalibrationKind::Dirichlet,
        };
        let file = calibrate(store, kind, None, &reg, &OptimizerConfig::default())?;
        put(out, TrajcalCalibration(file))
    })
}

/// Fits a temperature on `n` rows of row-major logits with labels.
#[no_mangle]
pub unsafe extern "C" fn trajcal_fit_temperature(
    logits: *const f64,
    labels: *const usize,
    n: usize,
    num_classes: usize,
    out: *mut *mut TrajcalCalibration,
) -> TrajcalStatus {
    guard(|| {
        let data = labeled(logits, labels, n, num_classes)?;
        let fit = fit_temperature(&data, &OptimizerConfig::default())?;
        put(out, TrajcalCalibration(CalibrationFile::from(&fit)))
    })
}

/// Fits a regularized Dirichlet map on `n` rows of row-major logits.
#[no_mangle]
pub unsafe extern "C" fn trajcal_fit_dirichlet(
    logits: *const f64,
    labels: *const usize,
    n: usize,
    num_classes: usize,
    lambda1: f64,
    lambda2: f64,
    out: *mut *mut TrajcalCalibration,
) -> TrajcalStatus {
    guard(|| {
        let data = labeled(logits, labels, n, num_classes)?;
        let reg = RegularizerConfig { lambda1, lambda2 };
        let fit = fit_dirichlet(&data, &reg, &OptimizerConfig::default())?;
        put(out, TrajcalCalibration(CalibrationFile::from(&fit)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_calibration_read(
    path: *const c_char,
    out: *mut *mut TrajcalCalibration,
) -> TrajcalStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, TrajcalCalibration(CalibrationFile::read(&PathBuf::from(path))?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_calibration_write(
    cal: *const TrajcalCalibration,
    path: *const c_char,
) -> TrajcalStatus {
    guard(|| {
        let cal = &ref_arg(cal, "calibration")?.0;
        let path = str_arg(path, "path")?;
        Ok(cal.write(&PathBuf::from(path))?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_calibration_free(cal: *mut TrajcalCalibration) {
    if !cal.is_null() {
        drop(Box::from_raw(cal));
    }
}

/// Whether the fit met the gradient tolerance; false for a null handle.
#[no_mangle]
pub unsafe extern "C" fn trajcal_calibration_converged(cal: *const TrajcalCalibration) -> bool {
    cal.as_ref().is_some_and(|c| c.0.converged)
}

/// The fitted temperature; `TRAJCAL_STATUS_INVALID_ARGUMENT` for a
/// Dirichlet map.
#[no_mangle]
pub unsafe extern "C" fn trajcal_calibration_gamma(cal: *const TrajcalCalibration, out: *mut f64) -> TrajcalStatus {
    guard(|| {
        let cal = &ref_arg(cal, "calibration")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        match &cal.map {
            trajcal::calibration::CalibrationMap::Temperature(g) => {
                *out = g.gamma();
                Ok(())
            }
            _ => Err(invalid("calibration is not a temperature map")),
        }
    })
}

/// Calibrated probabilities for one logit vector of `num_classes` entries.
#[no_mangle]
pub unsafe extern "C" fn trajcal_calibration_apply(
    cal: *const TrajcalCalibration,
    logits: *const f64,
    num_classes: usize,
    out: *mut f64,
) -> TrajcalStatus {
    guard(|| {
        let cal = &ref_arg(cal, "calibration")?.0;
        let z = slice_arg(logits, num_classes, "logits")?;
        let out = slice_out(out, num_classes, "out")?;
        copy_into(out, &cal.map.apply(z)?)
    })
}

/// Builds pseudo-labels for the store's train split and writes them to
/// `path`. `cal` is optional (null) and required only by the calibrated
/// methods.
#[no_mangle]
pub unsafe extern "C" fn trajcal_pseudo_labels_write(
    store: *const TrajcalStore,
    method: TrajcalMethod,
    cal: *const TrajcalCalibration,
    path: *const c_char,
) -> TrajcalStatus {
    guard(|| {
        let store = &ref_arg(store, "store")?.0;
        let path = str_arg(path, "path")?;
        let method = match method {
            TrajcalMethod::Onehot => Method::Onehot,
            TrajcalMethod::Rt4u => Method::Rt4u,
            TrajcalMethod::PseudoT => Method::PseudoT,
            TrajcalMethod::PseudoD => Method::PseudoD,
        };
        let map = cal.as_ref().map(|c| &c.0.map);
        let set = make_pseudo_labels(store, method, map, None)?;
        Ok(write_pseudo_labels(&set, &PathBuf::from(path))?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_predictions_load(
    path: *const c_char,
    out: *mut *mut TrajcalPredictions,
) -> TrajcalStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, TrajcalPredictions(read_predictions(&PathBuf::from(path))?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_predictions_free(preds: *mut TrajcalPredictions) {
    if !preds.is_null() {
        drop(Box::from_raw(preds));
    }
}

#[no_mangle]
pub unsafe extern "C" fn trajcal_predictions_len(preds: *const TrajcalPredictions) -> usize {
    preds.as_ref().map_or(0, |p| p.0.len())
}

/// Balanced accuracy, MAE, ECE (`num_bins` bins) and AURC over the default
/// coverage grid.
#[no_mangle]
pub unsafe extern "C" fn trajcal_predictions_metrics(
    preds: *const TrajcalPredictions,
    num_bins: usize,
    out: *mut TrajcalMetrics,
) -> TrajcalStatus {
    guard(|| {
        let preds = &ref_arg(preds, "predictions")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if num_bins == 0 {
            return Err(invalid("num_bins must be positive"));
        }
        let r = evaluate(preds, &SelectiveConfig::default(), num_bins)?;
        *out = TrajcalMetrics {
            balanced_accuracy: r.balanced_accuracy,
            balanced_mae: r.balanced_mae,
            balanced_ece: r.balanced_ece,
            aurc: r.aurc,
        };
        Ok(())
    })
}

/// Worst-case fusion of `num_members` row-major probability vectors.
#[no_mangle]
pub unsafe extern "C" fn trajcal_fuse_study(
    probs: *const f64,
    num_members: usize,
    num_classes: usize,
    normal_class: usize,
    out: *mut f64,
) -> TrajcalStatus {
    guard(|| {
        if num_classes == 0 || normal_class >= num_classes {
            return Err(invalid("normal_class out of range"));
        }
        let total = num_members
            .checked_mul(num_classes)
            .ok_or_else(|| invalid("num_members * num_classes overflows"))?;
        let probs = slice_arg(probs, total, "probs")?;
        let out = slice_out(out, num_classes, "out")?;
        let fused = fuse_vectors(probs.chunks_exact(num_classes), normal_class)
            .ok_or_else(|| invalid("study has no members"))?;
        copy_into(out, &fused)
    })
}

/// Runs the end-to-end pipeline into `out_dir`. `config_path` is optional
/// (null for defaults); `seed` overrides the configured seed.
#[no_mangle]
pub unsafe extern "C" fn trajcal_pipeline_run(
    config_path: *const c_char,
    seed: u64,
    out_dir: *const c_char,
) -> TrajcalStatus {
    guard(|| {
        let cfg = if config_path.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::load(&PathBuf::from(str_arg(config_path, "config_path")?))?
        };
        let out_dir = str_arg(out_dir, "out_dir")?;
        run_pipeline(&cfg.with_seed(seed), &PathBuf::from(out_dir))?;
        Ok(())
    })
}
