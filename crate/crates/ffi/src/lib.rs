//! C ABI over the `fairfed` library.
//!
//! Every fallible function returns an [`FfStatus`]; on failure the message is
//! available from [`ff_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles released by their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fairfed::datagen::{generate, read_dataset, write_dataset, PartitionSpec};
use fairfed::engine::{ServerState, TrainOptions, Trainer};
use fairfed::metrics::{evaluate_groups, Level};
use fairfed::simplex::{mirror_step_entropy, project_simplex};
use fairfed::verify::{run_suite, VerifyOptions};
use fairfed::{Error, FederatedDataset, ModelSpec, RunConfig, SimplexWeights};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfStatus {
    Ok = 0,
    InvalidInput = 1,
    DimensionMismatch = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    Verification = 6,
    Io = 7,
    Json = 8,
    Csv = 9,
    NullPointer = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Reporting level for [`ff_trainer_evaluate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfLevel {
    Attribute = 0,
    Client = 1,
}

/// A federated dataset.
pub struct FfDataset {
    data: FederatedDataset,
}

/// A training run: config, model, its own copy of the data and the server state.
pub struct FfTrainer {
    cfg: RunConfig,
    model: ModelSpec,
    data: FederatedDataset,
    state: ServerState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FfStatus {
    match e {
        Error::InvalidInput(_) => FfStatus::InvalidInput,
        Error::DimensionMismatch(_) => FfStatus::DimensionMismatch,
        Error::Config(_) => FfStatus::Config,
        Error::Data(_) => FfStatus::Data,
        Error::Numerical(_) => FfStatus::Numerical,
        Error::Verification(_) => FfStatus::Verification,
        Error::Io(_) => FfStatus::Io,
        Error::Json(_) => FfStatus::Json,
        Error::Csv(_) => FfStatus::Csv,
    }
}

enum Fail {
    Core(Error),
    Status(FfStatus, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(FfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FfStatus::Ok
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            FfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Status(FfStatus::InvalidInput, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn copy_out(values: &[f64], out: *mut f64, capacity: usize, needed: *mut usize) -> Result<(), Fail> {
    if !needed.is_null() {
        *needed = values.len();
    }
    if capacity < values.len() {
        return Err(Fail::Status(
            FfStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", values.len()),
        ));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

fn json_err(e: serde_json::Error) -> Fail {
    Fail::Core(Error::Json(e))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Euclidean projection of `v[0..len]` onto the probability simplex, written to `out`.
///
/// # Safety
/// `v` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ff_project_simplex(v: *const f64, len: usize, out: *mut f64) -> FfStatus {
    guard(|| {
        let w = project_simplex(slice_arg(v, len, "v")?)?;
        copy_out(w.as_slice(), out, len, ptr::null_mut())
    })
}

/// Entropic mirror step `lambda * exp(step * g)`, normalised, written to `out`.
///
/// # Safety
/// `lambda`, `g` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ff_mirror_step(
    lambda: *const f64,
    g: *const f64,
    len: usize,
    step: f64,
    out: *mut f64,
) -> FfStatus {
    guard(|| {
        let lambda = SimplexWeights::new(slice_arg(lambda, len, "lambda")?.to_vec())?;
        let r = mirror_step_entropy(&lambda, slice_arg(g, len, "g")?, step)?;
        copy_out(r.weights.as_slice(), out, len, ptr::null_mut())
    })
}

/// Runs the oracle suite; `all_passed` receives 1 or 0.
///
/// # Safety
/// `all_passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_verify(seed: u64, trials: usize, all_passed: *mut i32) -> FfStatus {
    guard(|| {
        if all_passed.is_null() {
            return Err(null("all_passed"));
        }
        let report = run_suite(&VerifyOptions { seed, trials: trials.max(1), fault: None })?;
        *all_passed = report.all_passed() as i32;
        Ok(())
    })
}

/// Generates a synthetic dataset from a partition spec in JSON.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ff_dataset_generate(
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut FfDataset,
) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = PartitionSpec::from_json(str_arg(spec_json, "spec_json")?)?;
        let data = generate(&spec, seed)?;
        *out = Box::into_raw(Box::new(FfDataset { data }));
        Ok(())
    })
}

/// Reads a dataset container and its sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ff_dataset_read(path: *const c_char, out: *mut *mut FfDataset) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = read_dataset(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FfDataset { data }));
        Ok(())
    })
}

/// Writes a dataset container and its sidecar.
///
/// # Safety
/// `ds` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ff_dataset_write(ds: *const FfDataset, path: *const c_char) -> FfStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        write_dataset(&ds.data, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of clients, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ff_dataset_client_count(ds: *const FfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.data.client_count())
}

/// Total number of samples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ff_dataset_sample_count(ds: *const FfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.data.total_samples())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_dataset_free(ds: *mut FfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

impl FfTrainer {
    fn trainer(&self) -> Result<Trainer<'_>, Error> {
        Trainer::new(self.cfg.clone(), &self.model, &self.data)
    }
}

/// Creates a run from a run config and a model spec, both JSON. The dataset is copied.
///
/// # Safety
/// Strings must be NUL-terminated, `ds` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_trainer_new(
    run_json: *const c_char,
    model_json: *const c_char,
    ds: *const FfDataset,
    out: *mut *mut FfTrainer,
) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::from_json(str_arg(run_json, "run_json")?)?;
        let model: ModelSpec = serde_json::from_str(str_arg(model_json, "model_json")?).map_err(json_err)?;
        model.validate()?;
        let data = ds.as_ref().ok_or_else(|| null("dataset"))?.data.clone();
        if data.class_count != model.class_count {
            return Err(Fail::Core(Error::DimensionMismatch(format!(
                "dataset has {} classes, model {}",
                data.class_count, model.class_count
            ))));
        }
        let state = Trainer::new(cfg.clone(), &model, &data)?.init_state()?;
        *out = Box::into_raw(Box::new(FfTrainer { cfg, model, data, state }));
        Ok(())
    })
}

/// Runs `rounds` further communication rounds.
///
/// # Safety
/// `t` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ff_trainer_run(t: *mut FfTrainer, rounds: usize) -> FfStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| null("trainer"))?;
        let trace = t.trainer()?.train_from(t.state.clone(), rounds, TrainOptions::default())?;
        t.state = trace.final_state;
        Ok(())
    })
}

/// Rounds completed so far, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ff_trainer_round(t: *const FfTrainer) -> u64 {
    t.as_ref().map_or(0, |t| t.state.round)
}

/// Copies the group weights into `out`. `needed` (optional) receives their count;
/// a short buffer yields `BufferTooSmall` with `needed` still set.
///
/// # Safety
/// `out` must hold `capacity` doubles; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn ff_trainer_lambda(
    t: *const FfTrainer,
    out: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> FfStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        copy_out(t.state.lambda.as_slice(), out, capacity, needed)
    })
}

/// Copies the model parameters into `out`, as [`ff_trainer_lambda`].
///
/// # Safety
/// `out` must hold `capacity` doubles; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn ff_trainer_theta(
    t: *const FfTrainer,
    out: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> FfStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        copy_out(t.state.theta.as_slice(), out, capacity, needed)
    })
}

/// Writes a resumable checkpoint, including the model spec.
///
/// # Safety
/// `t` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ff_trainer_save_checkpoint(t: *const FfTrainer, path: *const c_char) -> FfStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        let mut ckpt = t.trainer()?.checkpoint(&t.state);
        ckpt.model = Some(t.model);
        ckpt.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Evaluates the current model on `ds` and returns the metrics report as a JSON
/// string, to be released with [`ff_string_free`].
///
/// # Safety
/// Handles must come from this library and `json_out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_trainer_evaluate(
    t: *const FfTrainer,
    ds: *const FfDataset,
    level: FfLevel,
    json_out: *mut *mut c_char,
) -> FfStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if json_out.is_null() {
            return Err(null("json_out"));
        }
        let level = match level {
            FfLevel::Attribute => Level::Attribute,
            FfLevel::Client => Level::Client,
        };
        let report = evaluate_groups(&t.model, &t.state.theta, &ds.data)?.report(level)?;
        let text = serde_json::to_string(&report).map_err(json_err)?;
        *json_out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn ff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_trainer_free(t: *mut FfTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
