//! C ABI over the `drnet` pipeline.
//!
//! Every fallible function returns a [`DrnetStatus`]; on failure the message is
//! available from [`drnet_last_error`] on the same thread. Panics are caught at
//! the boundary and reported as [`DrnetStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use drnet::classifier::{predict_class, Classifier, NUM_CLASSES};
use drnet::error::Error;
use drnet::imageproc::{load_image, preprocess_chain, PreprocessConfig};
use drnet::optim::lr_schedule;
use drnet::params::NetworkParams;
use drnet::pipeline::{classification_report, load_classifier, ConfusionMatrix};
use drnet::tensor::Tensor;

/// Number of severity classes.
pub const DRNET_NUM_CLASSES: usize = 5;

const _: () = assert!(DRNET_NUM_CLASSES == NUM_CLASSES);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Config = 5,
    NonFinite = 6,
    Panic = 7,
}

impl From<&Error> for DrnetStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } | Error::Image { .. } => DrnetStatus::Io,
            Error::Data(_) => DrnetStatus::Data,
            Error::Config(_) => DrnetStatus::Config,
            Error::NonFinite(_) => DrnetStatus::NonFinite,
            _ => DrnetStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Fail(DrnetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(DrnetStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DrnetStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DrnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DrnetStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DrnetStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s =
        CStr::from_ptr(p).to_str().map_err(|_| Fail(DrnetStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next `drnet_*` call on this thread.
#[no_mangle]
pub extern "C" fn drnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static NUL-terminated library version.
#[no_mangle]
pub extern "C" fn drnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque trained classifier.
pub struct DrnetClassifier {
    model: Classifier,
    params: NetworkParams,
}

/// Loads a classifier checkpoint written by `drnet train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn drnet_classifier_load(path: *const c_char, out: *mut *mut DrnetClassifier) -> DrnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let (model, params) = load_classifier(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DrnetClassifier { model, params }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from `drnet_classifier_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn drnet_classifier_free(handle: *mut DrnetClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Side length of the square input the classifier expects.
///
/// # Safety
/// `handle` must be a live classifier.
#[no_mangle]
pub unsafe extern "C" fn drnet_classifier_input_size(handle: *const DrnetClassifier) -> usize {
    handle.as_ref().map_or(0, |h| h.model.config().input_size)
}

/// Classifies one image of `size * size` values in [-1, 1], row-major.
/// Writes the class probabilities to `probs` (`DRNET_NUM_CLASSES` values) and
/// the argmax to `class_out`; either may be null.
///
/// # Safety
/// `pixels` must hold `size * size` floats; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn drnet_classifier_predict(
    handle: *const DrnetClassifier,
    pixels: *const f32,
    size: usize,
    probs: *mut f32,
    class_out: *mut u32,
) -> DrnetStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let expected = h.model.config().input_size;
        if size != expected {
            return Err(Fail(
                DrnetStatus::InvalidArgument,
                format!("input size {size}, classifier expects {expected}"),
            ));
        }
        let data = std::slice::from_raw_parts(pixels, size * size).to_vec();
        let p = h.model.predict(&h.params, &Tensor::new([1, 1, size, size], data)?)?;
        let class = predict_class(p.data())?;
        if !probs.is_null() {
            ptr::copy_nonoverlapping(p.data().as_ptr(), probs, NUM_CLASSES);
        }
        if !class_out.is_null() {
            *class_out = class.index() as u32;
        }
        Ok(())
    })
}

/// Runs the default preprocessing chain on an image file and writes
/// `size * size` values in [-1, 1] to `out`, which holds `out_len` floats.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn drnet_preprocess_file(
    path: *const c_char,
    size: usize,
    out: *mut f32,
    out_len: usize,
) -> DrnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < size * size {
            return Err(Fail(
                DrnetStatus::InvalidArgument,
                format!("buffer of {out_len} floats, need {}", size * size),
            ));
        }
        let config = PreprocessConfig { size, ..PreprocessConfig::default() };
        let img = preprocess_chain(&load_image(&path_arg(path)?)?, &config)?;
        ptr::copy_nonoverlapping(img.data().as_ptr(), out, size * size);
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DrnetClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DrnetReport {
    pub classes: [DrnetClassMetrics; DRNET_NUM_CLASSES],
    pub accuracy: f64,
    pub total: u64,
}

/// Precision, recall and F1 from a row-major 5×5 confusion matrix
/// (rows are true classes, columns predictions).
///
/// # Safety
/// `counts` must hold 25 values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drnet_classification_report(counts: *const u64, out: *mut DrnetReport) -> DrnetStatus {
    guard(|| {
        if counts.is_null() {
            return Err(null("counts"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let flat = std::slice::from_raw_parts(counts, NUM_CLASSES * NUM_CLASSES);
        let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&flat[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]);
        }
        let r = classification_report(&ConfusionMatrix::from_counts(m))?;
        *out = DrnetReport {
            classes: r.classes.map(|c| DrnetClassMetrics {
                precision: c.precision,
                recall: c.recall,
                f1: c.f1,
                support: c.support,
            }),
            accuracy: r.accuracy,
            total: r.total,
        };
        Ok(())
    })
}

/// Learning rate of `epoch` for a step schedule dividing `initial` by 10
/// every 10 epochs.
#[no_mangle]
pub extern "C" fn drnet_lr_schedule(initial: f64, epoch: usize) -> f64 {
    lr_schedule(initial, epoch)
}
