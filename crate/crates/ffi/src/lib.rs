//! C ABI over trained causalproto checkpoints.
//!
//! Every fallible call returns a status code; on failure the message is
//! available from [`cp_last_error_message`] on the same thread. Images are
//! passed as contiguous HWC `float` RGB in `[0, 1]`, `n` images back to back.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use causalproto::datagen::ImageSample;
use causalproto::metrics::classification_metrics;
use causalproto::model::Branch;
use causalproto::trainer::{load_checkpoint, TrainState};
use causalproto::Error;

pub const CP_OK: i32 = 0;
pub const CP_NULL_POINTER: i32 = 1;
pub const CP_INVALID_ARGUMENT: i32 = 2;
pub const CP_IO_ERROR: i32 = 3;
pub const CP_CHECKPOINT_ERROR: i32 = 4;
pub const CP_INTERNAL_ERROR: i32 = 5;

const CHUNK: usize = 128;

/// A loaded model. Create with [`cp_model_load`], release with [`cp_model_free`].
pub struct CpModel {
    state: TrainState,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CpMetrics {
    pub acc: f64,
    pub bacc: f64,
    pub macro_f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Image { .. } => CP_IO_ERROR,
            Error::Checkpoint(_) | Error::Parse { .. } => CP_CHECKPOINT_ERROR,
            Error::Config(_) | Error::Contract(_) => CP_INVALID_ARGUMENT,
            _ => CP_INTERNAL_ERROR,
        };
        Failure(code, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CP_NULL_POINTER, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(CP_INVALID_ARGUMENT, msg)
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(CP_INTERNAL_ERROR, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            set_error("");
            CP_OK
        }
        Err(Failure(code, msg)) => {
            set_error(&msg);
            code
        }
    }
}

/// Loads a checkpoint written by `causalproto train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_model_load(path: *const c_char, out: *mut *mut CpModel) -> i32 {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8".into()))?;
        let state = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(CpModel { state }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`cp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cp_model_free(model: *mut CpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_model_num_classes(model: *const CpModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.num_classes)
}

/// Dimension of the causal latent, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_model_latent_dim(model: *const CpModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.config.latent_dim)
}

/// Side length of the square images the model was trained on, or 0.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_model_image_size(model: *const CpModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.image_size)
}

unsafe fn images<'a>(
    model: *const CpModel,
    pixels: *const f32,
    n: usize,
    height: usize,
    width: usize,
) -> Result<(&'a CpModel, Vec<ImageSample>), Failure> {
    let model = model.as_ref().ok_or_else(|| null("model"))?;
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let size = model.state.image_size;
    if height != size || width != size {
        return Err(invalid(format!("model expects {size}x{size} images, got {height}x{width}")));
    }
    let per = height * width * 3;
    let data = std::slice::from_raw_parts(pixels, n * per);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("pixels contain non-finite values".into()));
    }
    let samples = data
        .chunks(per)
        .enumerate()
        .map(|(i, px)| ImageSample {
            sample_id: format!("ffi-{i}"),
            height,
            width,
            pixels: px.to_vec(),
            label: 0,
            artifact_id: None,
        })
        .collect();
    Ok((model, samples))
}

fn check_out(ptr: *mut f64, len: usize, need: usize, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(invalid(format!("{what} holds {len} values, {need} needed")));
    }
    Ok(())
}

/// Class probabilities for `n` images, written row-major as `n x num_classes`.
///
/// # Safety
/// `pixels` must hold `n * height * width * 3` floats and `probs` `probs_len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn cp_model_predict(
    model: *const CpModel,
    pixels: *const f32,
    n: usize,
    height: usize,
    width: usize,
    probs: *mut f64,
    probs_len: usize,
) -> i32 {
    guard(|| {
        let (model, samples) = images(model, pixels, n, height, width)?;
        check_out(probs, probs_len, n * model.state.num_classes, "probs")?;
        if n == 0 {
            return Ok(());
        }
        let refs: Vec<&ImageSample> = samples.iter().collect();
        let p = model.state.predict_probs(&refs)?;
        std::slice::from_raw_parts_mut(probs, p.len()).copy_from_slice(p.data());
        Ok(())
    })
}

/// Causal latents for `n` images, written row-major as `n x latent_dim`.
///
/// # Safety
/// As for [`cp_model_predict`], with `latents` holding `latents_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cp_model_encode(
    model: *const CpModel,
    pixels: *const f32,
    n: usize,
    height: usize,
    width: usize,
    latents: *mut f64,
    latents_len: usize,
) -> i32 {
    guard(|| {
        let (model, samples) = images(model, pixels, n, height, width)?;
        check_out(latents, latents_len, n * model.state.config.latent_dim, "latents")?;
        if n == 0 {
            return Ok(());
        }
        let refs: Vec<&ImageSample> = samples.iter().collect();
        let z = model.state.encoder.encode_samples(&refs, Branch::Causal, CHUNK)?;
        std::slice::from_raw_parts_mut(latents, z.len()).copy_from_slice(z.data());
        Ok(())
    })
}

/// Accuracy, balanced accuracy and macro-F1 of `n` predictions.
///
/// # Safety
/// `preds` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_classification_metrics(
    preds: *const usize,
    labels: *const usize,
    n: usize,
    num_classes: usize,
    out: *mut CpMetrics,
) -> i32 {
    guard(|| {
        if preds.is_null() {
            return Err(null("preds"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let m = classification_metrics(
            std::slice::from_raw_parts(preds, n),
            std::slice::from_raw_parts(labels, n),
            num_classes,
        )?;
        *out = CpMetrics {
            acc: m.acc,
            bacc: m.bacc,
            macro_f1: m.macro_f1,
        };
        Ok(())
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn cp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
