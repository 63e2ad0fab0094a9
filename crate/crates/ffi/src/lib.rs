//! C ABI over `seldefer`.
//!
//! Every fallible call returns an [`SdStatus`]; on failure the message is
//! available from [`sd_last_error_message`] on the same thread. Models are
//! opaque handles released with [`sd_model_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use seldefer::cli::{cmd_train, Common};
use seldefer::dataset::Featurizer;
use seldefer::evaluation::compute_metrics;
use seldefer::model::{decide, predict, Checkpoint};
use seldefer::numerics::ProbabilityVector;
use seldefer::reward::{per_example_reward, validate_signal, RewardSignal};
use seldefer::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Validation = 6,
    Checkpoint = 7,
    State = 8,
    Divergence = 9,
    Panic = 10,
}

impl From<&Error> for SdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => SdStatus::InvalidArgument,
            Error::State(_) => SdStatus::State,
            Error::Divergence(_) => SdStatus::Divergence,
            Error::Parse { .. } => SdStatus::Parse,
            Error::Config(_) => SdStatus::Config,
            Error::Validation(_) => SdStatus::Validation,
            Error::Checkpoint(_) => SdStatus::Checkpoint,
            Error::Io { .. } => SdStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(SdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SdStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SdStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            SdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread; empty after success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, NUL-terminated, static.
#[no_mangle]
pub extern "C" fn sd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A loaded checkpoint.
pub struct SdModel {
    checkpoint: Checkpoint,
    featurizer: Featurizer,
}

/// Outcome of one prediction.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SdPrediction {
    pub label: u32,
    /// Nonzero when the policy defers.
    pub defer: u8,
    pub p_defer: f64,
}

/// Mirrors the metrics record.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SdMetrics {
    pub cl_acc: f64,
    pub cl_f1: f64,
    pub dp_acc: f64,
    pub dp_f1: f64,
    pub sp_acc: f64,
    pub sp_f1: f64,
    pub deferral_rate: f64,
    pub n_a: u64,
    pub n_b: u64,
    pub n_c: u64,
    pub n_d: u64,
}

/// Loads a checkpoint into `*out`. The handle must be released with
/// `sd_model_free`.
#[no_mangle]
pub unsafe extern "C" fn sd_model_load(path: *const c_char, out: *mut *mut SdModel) -> SdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let checkpoint = Checkpoint::load(&path)?;
        let featurizer = Featurizer::new(checkpoint.model.config.feature_bits)?;
        *out = Box::into_raw(Box::new(SdModel { checkpoint, featurizer }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sd_model_free(model: *mut SdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the feature vector the model expects; 0 for null.
#[no_mangle]
pub unsafe extern "C" fn sd_model_input_dim(model: *const SdModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.model.config.input_dim())
}

/// Number of classes; 0 for null.
#[no_mangle]
pub unsafe extern "C" fn sd_model_num_classes(model: *const SdModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.model.config.num_classes())
}

unsafe fn predict_into(
    model: &SdModel,
    features: &[f64],
    class_probs: *mut f64,
    class_probs_len: usize,
    out: *mut SdPrediction,
) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let (p_c, p_d) = model.checkpoint.model.infer(features)?;
    if !class_probs.is_null() {
        if class_probs_len != p_c.len() {
            return Err(Failure(
                SdStatus::InvalidArgument,
                format!("class_probs holds {class_probs_len} values, model has {} classes", p_c.len()),
            ));
        }
        slice::from_raw_parts_mut(class_probs, class_probs_len).copy_from_slice(&p_c);
    }
    *out = SdPrediction {
        label: predict(&p_c) as u32,
        defer: decide(&p_d) as u8,
        p_defer: p_d[1],
    };
    Ok(())
}

/// Featurizes `text` and predicts. `class_probs` may be null; otherwise it
/// must hold exactly `sd_model_num_classes` values.
#[no_mangle]
pub unsafe extern "C" fn sd_model_predict_text(
    model: *const SdModel,
    text: *const c_char,
    class_probs: *mut f64,
    class_probs_len: usize,
    out: *mut SdPrediction,
) -> SdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = m.featurizer.featurize(str_arg(text, "text")?);
        predict_into(m, &x, class_probs, class_probs_len, out)
    })
}

/// Predicts from a precomputed feature vector of `sd_model_input_dim`
/// values.
#[no_mangle]
pub unsafe extern "C" fn sd_model_predict_features(
    model: *const SdModel,
    features: *const f64,
    len: usize,
    class_probs: *mut f64,
    class_probs_len: usize,
    out: *mut SdPrediction,
) -> SdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = slice_arg(features, len, "features")?;
        predict_into(m, x, class_probs, class_probs_len, out)
    })
}

/// Writes the hashed, L2-normalized feature vector of `text` into `out`,
/// which must hold `2^bits` values.
#[no_mangle]
pub unsafe extern "C" fn sd_featurize(text: *const c_char, bits: u32, out: *mut f64, out_len: usize) -> SdStatus {
    guard(|| {
        let f = Featurizer::new(bits)?;
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != f.dim() {
            return Err(Failure(
                SdStatus::InvalidArgument,
                format!("out holds {out_len} values, 2^{bits} = {} needed", f.dim()),
            ));
        }
        slice::from_raw_parts_mut(out, out_len).copy_from_slice(&f.featurize(text));
        Ok(())
    })
}

/// Expected reward of the keep/defer distribution `(p_keep, p_defer)`
/// under `signal = [a, b, c, d]`.
#[no_mangle]
pub unsafe extern "C" fn sd_reward_per_example(
    p_keep: f64,
    p_defer: f64,
    cl_correct: bool,
    signal: *const f64,
    out: *mut f64,
) -> SdStatus {
    guard(|| {
        let s = slice_arg(signal, 4, "signal")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sig = RewardSignal::new(s[0], s[1], s[2], s[3]);
        validate_signal(&sig)?;
        let p = ProbabilityVector::new(vec![p_keep, p_defer])?;
        *out = per_example_reward(&p, cl_correct, &sig);
        Ok(())
    })
}

/// Metrics over `n` examples; `actions[i]` nonzero means deferred.
#[no_mangle]
pub unsafe extern "C" fn sd_compute_metrics(
    cl_preds: *const u32,
    gold: *const u32,
    actions: *const u8,
    n: usize,
    out: *mut SdMetrics,
) -> SdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let to_usize = |v: &[u32]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
        let preds = to_usize(slice_arg(cl_preds, n, "cl_preds")?);
        let gold = to_usize(slice_arg(gold, n, "gold")?);
        let actions: Vec<bool> = slice_arg(actions, n, "actions")?.iter().map(|&a| a != 0).collect();
        let m = compute_metrics(&preds, &gold, &actions)?;
        *out = SdMetrics {
            cl_acc: m.cl_acc,
            cl_f1: m.cl_f1,
            dp_acc: m.dp_acc,
            dp_f1: m.dp_f1,
            sp_acc: m.sp_acc,
            sp_f1: m.sp_f1,
            deferral_rate: m.deferral_rate,
            n_a: m.counts.n_a as u64,
            n_b: m.counts.n_b as u64,
            n_c: m.counts.n_c as u64,
            n_d: m.counts.n_d as u64,
        };
        Ok(())
    })
}

/// Same as the `train` subcommand. `out_dir` may be null to use the
/// configured `output_dir`.
#[no_mangle]
pub unsafe extern "C" fn sd_train_from_config(config_path: *const c_char, out_dir: *const c_char) -> SdStatus {
    guard(|| {
        let config = PathBuf::from(str_arg(config_path, "config_path")?);
        let out = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(out_dir, "out_dir")?))
        };
        cmd_train(&Common {
            config,
            seed: None,
            out,
            threads: 1,
        })?;
        Ok(())
    })
}
