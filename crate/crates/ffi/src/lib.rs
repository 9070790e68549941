//! C ABI over the `utuning` library.
//!
//! Every function returns a [`UtStatus`]; on failure the message is available
//! from [`ut_last_error_message`] on the same thread. Handles are opaque and
//! must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use utuning::backbone::{Backbone, BackboneConfig};
use utuning::checkpoint;
use utuning::composer::{self, compose, count_params, ComposedModel, UTuningConfig};
use utuning::error::Error;
use utuning::run_config::{BackboneChoice, RunConfig};
use utuning::tensor::Tensor;
use utuning::verify::{run_equivalence, EquivalenceOptions, TunerType};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    Numeric = 7,
    Contract = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for UtStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => UtStatus::Dimension,
            Error::Config { .. } => UtStatus::Config,
            Error::Format(_) | Error::Json(_) => UtStatus::Format,
            Error::Io(_) => UtStatus::Io,
            Error::NonFinite { .. } | Error::Diverged { .. } => UtStatus::Numeric,
            Error::Contract(_) | Error::FrozenModified(_) => UtStatus::Contract,
        }
    }
}

/// Opaque backbone handle.
pub struct UtBackbone {
    inner: Backbone,
}

/// Opaque composed-model handle (frozen backbone plus tuners).
pub struct UtModel {
    inner: ComposedModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UtDims {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub tokens: usize,
    pub input_width: usize,
    pub classes: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UtParamCount {
    pub head: usize,
    pub tuners: usize,
    pub frozen: usize,
    pub trainable: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UtEquivalenceSummary {
    pub cases: usize,
    pub failed: usize,
    pub max_diff_prefix: f64,
    pub max_diff_prompt: f64,
    pub max_diff_adapter: f64,
    pub max_gate_error: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Fail(UtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(UtStatus::from(&e), e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> UtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            UtStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside utuning");
            UtStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    // SAFETY: the caller passes either null or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(UtStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> FfiResult<*mut T> {
    if p.is_null() {
        return Err(Fail(UtStatus::NullPointer, format!("{what} is null")));
    }
    Ok(p)
}

fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Fail(UtStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and documented as a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(UtStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// A preset name or a JSON object.
fn tuner_config(s: &str) -> FfiResult<UTuningConfig> {
    if s.trim_start().starts_with('{') {
        return Ok(UTuningConfig::from_json(s)?);
    }
    composer::preset(s).ok_or_else(|| Fail(UtStatus::Config, format!("unknown tuner preset `{s}`")))
}

fn backbone_config(s: &str) -> FfiResult<BackboneConfig> {
    let choice = if s.trim_start().starts_with('{') {
        RunConfig::from_json(&format!("{{\"backbone\": {s}}}"))?.backbone
    } else {
        Some(BackboneChoice::Preset(s.to_string()))
    };
    Ok(choice.expect("backbone key is set").resolve()?)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ut_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ut_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Randomly initialised backbone from a preset name (`desk`, `vitb16`, `tiny`) or JSON config.
#[no_mangle]
pub extern "C" fn ut_backbone_new(
    config: *const c_char,
    seed: u64,
    out: *mut *mut UtBackbone,
) -> UtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = backbone_config(text(config, "config")?)?;
        let bb = Backbone::new(cfg, seed)?;
        // SAFETY: `out` is non-null and points to writable storage for one pointer.
        unsafe { *out = Box::into_raw(Box::new(UtBackbone { inner: bb })) };
        Ok(())
    })
}

/// Loads the backbone tensors of a checkpoint file.
#[no_mangle]
pub extern "C" fn ut_backbone_load(path: *const c_char, out: *mut *mut UtBackbone) -> UtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let bb = checkpoint::load(&PathBuf::from(text(path, "path")?))?.backbone()?;
        // SAFETY: as in `ut_backbone_new`.
        unsafe { *out = Box::into_raw(Box::new(UtBackbone { inner: bb })) };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn ut_backbone_save(backbone: *const UtBackbone, path: *const c_char) -> UtStatus {
    guard(|| {
        let bb = non_null(backbone, "backbone")?;
        checkpoint::save_backbone(&PathBuf::from(text(path, "path")?), &bb.inner, None)?;
        Ok(())
    })
}

/// Releases a backbone; null is ignored.
///
/// # Safety
/// `backbone` is null or a live handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ut_backbone_free(backbone: *mut UtBackbone) {
    if !backbone.is_null() {
        // SAFETY: the pointer came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(backbone) });
    }
}

/// Freezes a copy of `backbone` and attaches tuners from a preset name or JSON config.
#[no_mangle]
pub extern "C" fn ut_model_compose(
    backbone: *const UtBackbone,
    config: *const c_char,
    seed: u64,
    out: *mut *mut UtModel,
) -> UtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let bb = non_null(backbone, "backbone")?;
        let cfg = tuner_config(text(config, "config")?)?;
        cfg.validate(&bb.inner.config)?;
        let m = compose(&bb.inner, &cfg, seed)?;
        // SAFETY: as in `ut_backbone_new`.
        unsafe { *out = Box::into_raw(Box::new(UtModel { inner: m })) };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn ut_model_load(path: *const c_char, out: *mut *mut UtModel) -> UtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = checkpoint::load(&PathBuf::from(text(path, "path")?))?.model()?;
        // SAFETY: as in `ut_backbone_new`.
        unsafe { *out = Box::into_raw(Box::new(UtModel { inner: m })) };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn ut_model_save(model: *const UtModel, path: *const c_char) -> UtStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        checkpoint::save_model(&PathBuf::from(text(path, "path")?), &m.inner, None)?;
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` is null or a live handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ut_model_free(model: *mut UtModel) {
    if !model.is_null() {
        // SAFETY: the pointer came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}

#[no_mangle]
pub extern "C" fn ut_model_dims(model: *const UtModel, out: *mut UtDims) -> UtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let c = &non_null(model, "model")?.inner.backbone.config;
        // SAFETY: non-null, writable.
        unsafe {
            *out = UtDims {
                layers: c.layers,
                width: c.width,
                heads: c.heads,
                tokens: c.tokens,
                input_width: c.input_width,
                classes: c.classes,
            }
        };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn ut_model_trainable_params(model: *const UtModel, out: *mut usize) -> UtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = non_null(model, "model")?;
        // SAFETY: non-null, writable.
        unsafe { *out = m.inner.count_trainable_params() };
        Ok(())
    })
}

/// Logits for `batch` samples. `input` holds `batch × tokens × input_width`
/// doubles, `output` receives `batch × classes` doubles.
/// With `frozen` nonzero the tuners are bypassed.
///
/// # Safety
/// `input` points to that many readable doubles and `output` to `output_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn ut_model_forward(
    model: *const UtModel,
    input: *const f64,
    batch: usize,
    output: *mut f64,
    output_len: usize,
    frozen: i32,
) -> UtStatus {
    guard(|| {
        let m = &non_null(model, "model")?.inner;
        let c = &m.backbone.config;
        if input.is_null() || output.is_null() {
            return Err(Fail(
                UtStatus::NullPointer,
                "input or output is null".into(),
            ));
        }
        if batch == 0 {
            return Err(Fail(UtStatus::Dimension, "batch must be ≥ 1".into()));
        }
        let need = batch * c.classes;
        if output_len < need {
            return Err(Fail(
                UtStatus::BufferTooSmall,
                format!("output holds {output_len} values, {need} needed"),
            ));
        }
        let n = batch * c.tokens * c.input_width;
        // SAFETY: the caller guarantees `input` points to `n` readable doubles.
        let data = unsafe { std::slice::from_raw_parts(input, n) }.to_vec();
        let x = Tensor::new(&[batch, c.tokens, c.input_width], data)?;
        let logits = if frozen != 0 {
            m.frozen_forward_batch(&x)?
        } else {
            m.forward_batch(&x)?
        };
        // SAFETY: `output` has room for `need ≤ output_len` doubles.
        unsafe { ptr::copy_nonoverlapping(logits.data().as_ptr(), output, need) };
        Ok(())
    })
}

/// Shape-only parameter count for a backbone and tuner config (preset names or JSON).
#[no_mangle]
pub extern "C" fn ut_count_params(
    backbone: *const c_char,
    tuners: *const c_char,
    out: *mut UtParamCount,
) -> UtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let b = backbone_config(text(backbone, "backbone")?)?;
        let t = tuner_config(text(tuners, "tuners")?)?;
        t.validate(&b)?;
        let c = count_params(&b, &t)?;
        // SAFETY: non-null, writable.
        unsafe {
            *out = UtParamCount {
                head: c.head,
                tuners: c.tuners,
                frozen: c.frozen,
                trainable: c.trainable(),
            }
        };
        Ok(())
    })
}

/// Runs `cases` randomized equivalence cases per tuner type.
/// Returns `UT_STATUS_OK` even when cases fail; check `failed`.
#[no_mangle]
pub extern "C" fn ut_verify_equivalence(
    cases: usize,
    seed: u64,
    break_gate: i32,
    out: *mut UtEquivalenceSummary,
) -> UtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let r = run_equivalence(&EquivalenceOptions {
            cases,
            seed,
            break_gate: break_gate != 0,
            ..Default::default()
        })?;
        let failed = r
            .cases
            .iter()
            .filter(|c| !c.passed || c.gate.as_ref().is_some_and(|g| !g.passed))
            .count();
        // SAFETY: non-null, writable.
        unsafe {
            *out = UtEquivalenceSummary {
                cases: r.cases.len(),
                failed,
                max_diff_prefix: r.max_diff(TunerType::Prefix),
                max_diff_prompt: r.max_diff(TunerType::Prompt),
                max_diff_adapter: r.max_diff(TunerType::Adapter),
                max_gate_error: r.max_gate_error(),
            }
        };
        Ok(())
    })
}
