//! C ABI over the `osdn` library.
//!
//! Tasks and models are opaque heap handles released with their `_free`
//! functions. Every fallible call returns an [`OsdnStatus`]; on failure the
//! message is available from [`osdn_last_error`] until the next failing call on
//! the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use osdn::config::TaskSpec;
use osdn::data::{synth_task, OpenSetTask, SynthSpec};
use osdn::evaluation::{compute_metrics, openness, predict_labels, EvalMode};
use osdn::model::Model;
use osdn::numerics::Tensor;
use osdn::training::{load_checkpoint, save_checkpoint, train, HyperParams, TrainData};
use osdn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OsdnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    Numeric = 6,
    Data = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OsdnMode {
    Acc = 0,
    Ind = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OsdnMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OsdnTaskInfo {
    pub k: usize,
    pub n_source: usize,
    pub d_source: usize,
    pub n_target: usize,
    pub d_target: usize,
    /// 1 when the target domain carries ground truth.
    pub labeled: i32,
}

/// Opaque task handle.
pub struct OsdnTask(OpenSetTask);

/// Opaque model handle; keeps the hyperparameters it was trained with.
pub struct OsdnModel {
    model: Model,
    hp: HyperParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> OsdnStatus {
    match e {
        Error::Io(_) => OsdnStatus::Io,
        Error::Json(_) | Error::Csv(_) | Error::Parse { .. } | Error::CheckpointParse { .. } | Error::UnsupportedVersion { .. } => {
            OsdnStatus::Parse
        }
        Error::Shape { .. } | Error::Index { .. } => OsdnStatus::Shape,
        Error::NonFinite { .. } | Error::TrainingAborted { .. } | Error::DegenerateVector { .. } | Error::DegenerateCentroid { .. } => {
            OsdnStatus::Numeric
        }
        Error::Dataset { .. } | Error::ZeroRows { .. } | Error::EmptyCategory { .. } => OsdnStatus::Data,
        _ => OsdnStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (OsdnStatus, String)>) -> OsdnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OsdnStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OsdnStatus::Panic
        }
    }
}

trait Lift<T> {
    fn lift(self) -> Result<T, (OsdnStatus, String)>;
}

impl<T> Lift<T> for osdn::Result<T> {
    fn lift(self) -> Result<T, (OsdnStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (OsdnStatus, String) {
    (OsdnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (OsdnStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (OsdnStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (OsdnStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn task_ref<'a>(p: *const OsdnTask) -> Result<&'a OpenSetTask, (OsdnStatus, String)> {
    p.as_ref().map(|t| &t.0).ok_or_else(|| null("task"))
}

unsafe fn model_ref<'a>(p: *const OsdnModel) -> Result<&'a OsdnModel, (OsdnStatus, String)> {
    p.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread; empty if none. Owned by the library.
#[no_mangle]
pub extern "C" fn osdn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn osdn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates and preprocesses a synthetic open-set task.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn osdn_task_synth(
    k: usize,
    unknown_count: usize,
    n_per_category: usize,
    d_source: usize,
    d_target: usize,
    separation: f64,
    seed: u64,
    out: *mut *mut OsdnTask,
) -> OsdnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = SynthSpec {
            k,
            unknown_count,
            n_per_category,
            d_source,
            d_target,
            separation,
            seed,
        };
        let task = synth_task(&spec).and_then(|t| t.preprocessed(None, None)).lift()?;
        *out = Box::into_raw(Box::new(OsdnTask(task)));
        Ok(())
    })
}

/// Loads and preprocesses a task file (JSON, `kind` = `csv` or `synth`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn osdn_task_load(path: *const c_char, out: *mut *mut OsdnTask) -> OsdnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let task = TaskSpec::load(&path).and_then(|s| s.prepare()).lift()?;
        *out = Box::into_raw(Box::new(OsdnTask(task)));
        Ok(())
    })
}

/// # Safety
/// `task` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn osdn_task_free(task: *mut OsdnTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// # Safety
/// `task` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn osdn_task_info(task: *const OsdnTask, out: *mut OsdnTaskInfo) -> OsdnStatus {
    guard(|| {
        let t = task_ref(task)?;
        let out = out_arg(out, "out")?;
        *out = OsdnTaskInfo {
            k: t.k(),
            n_source: t.source.features.rows(),
            d_source: t.source.features.cols(),
            n_target: t.target.features.rows(),
            d_target: t.target.features.cols(),
            labeled: i32::from(t.target_truth.is_some()),
        };
        Ok(())
    })
}

/// Trains a model on `task`. `hyperparams_json` may be null for defaults; missing
/// fields take their defaults.
///
/// # Safety
/// `task` must be a live handle, `hyperparams_json` null or NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn osdn_train(
    task: *const OsdnTask,
    hyperparams_json: *const c_char,
    out: *mut *mut OsdnModel,
) -> OsdnStatus {
    guard(|| {
        let t = task_ref(task)?;
        let out = out_arg(out, "out")?;
        let hp: HyperParams = if hyperparams_json.is_null() {
            HyperParams::default()
        } else {
            let text = CStr::from_ptr(hyperparams_json)
                .to_str()
                .map_err(|_| (OsdnStatus::InvalidArgument, "hyperparameters are not UTF-8".to_string()))?;
            serde_json::from_str(text).map_err(|e| (OsdnStatus::Parse, e.to_string()))?
        };
        let (model, _) = train(&TrainData::from_task(t), &hp).lift()?;
        *out = Box::into_raw(Box::new(OsdnModel { model, hp }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn osdn_model_free(model: *mut OsdnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn osdn_model_save(model: *const OsdnModel, path: *const c_char) -> OsdnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&m.model, &m.hp, &path).lift()
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn osdn_model_load(path: *const c_char, out: *mut *mut OsdnModel) -> OsdnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let (model, hp) = load_checkpoint(&path).lift()?;
        *out = Box::into_raw(Box::new(OsdnModel { model, hp }));
        Ok(())
    })
}

/// Predicts labels in `0..=K` (`K` = unknown) for `rows × cols` row-major,
/// already preprocessed target features.
///
/// # Safety
/// `features` must point to `rows * cols` doubles and `labels` to `rows` writable slots.
#[no_mangle]
pub unsafe extern "C" fn osdn_predict(
    model: *const OsdnModel,
    features: *const f64,
    rows: usize,
    cols: usize,
    labels: *mut usize,
) -> OsdnStatus {
    guard(|| {
        let m = model_ref(model)?;
        if features.is_null() {
            return Err(null("features"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or((OsdnStatus::InvalidArgument, "rows * cols overflows".to_string()))?;
        let data = std::slice::from_raw_parts(features, len).to_vec();
        let x = Tensor::from_vec(rows, cols, data).lift()?;
        let pred = predict_labels(&m.model, &x).lift()?;
        ptr::copy_nonoverlapping(pred.as_ptr(), labels, rows);
        Ok(())
    })
}

/// Evaluates `model` on the labeled target domain of `task`.
///
/// # Safety
/// `model` and `task` must be live handles and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn osdn_evaluate(
    model: *const OsdnModel,
    task: *const OsdnTask,
    mode: OsdnMode,
    out: *mut OsdnMetrics,
) -> OsdnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let t = task_ref(task)?;
        let out = out_arg(out, "out")?;
        let truth = t
            .target_truth
            .as_ref()
            .ok_or((OsdnStatus::Data, "target domain is unlabeled".to_string()))?;
        let mode = match mode {
            OsdnMode::Acc => EvalMode::Acc,
            OsdnMode::Ind => EvalMode::Ind,
        };
        let pred = predict_labels(&m.model, &t.target.features).lift()?;
        let r = compute_metrics(&pred, truth, mode, t.normal_category, t.k()).lift()?;
        *out = OsdnMetrics {
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            n: r.n,
        };
        Ok(())
    })
}

/// `1 − K / K′`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn osdn_openness(k: usize, k_prime: usize, out: *mut f64) -> OsdnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = openness(k, k_prime).lift()?;
        Ok(())
    })
}
