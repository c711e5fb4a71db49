//! C ABI over a trained `sedtriadv` run.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free`. Every function returns a [`SedStatus`]; on failure the
//! message is available from [`sed_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sedtriadv::audio::{log_mel, AudioClip};
use sedtriadv::evaluator::decode;
use sedtriadv::model::FramePrediction;
use sedtriadv::trainer::{LoadedRun, FINAL_CKPT};
use sedtriadv::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Config = 4,
    Checkpoint = 5,
    InvalidAudio = 6,
    Shape = 7,
    OutOfRange = 8,
    BufferTooSmall = 9,
    NonFinite = 10,
    Panic = 11,
    Other = 12,
}

/// One decoded event.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SedEvent {
    pub class_id: u32,
    pub onset_s: f64,
    pub offset_s: f64,
}

/// A loaded model plus its preprocessing and decoding settings.
pub struct SedRun {
    run: LoadedRun,
    class_names: Vec<CString>,
}

/// Frame probabilities and decoded events of one clip.
pub struct SedPrediction {
    pred: FramePrediction,
    events: Vec<SedEvent>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SedStatus {
    match e {
        Error::Io(_) | Error::Wav(_) => SedStatus::Io,
        Error::Config(_) | Error::Json(_) | Error::Manifest { .. } | Error::UnsupportedRate { .. } => SedStatus::Config,
        Error::Checkpoint(_) => SedStatus::Checkpoint,
        Error::InvalidAudio(_) => SedStatus::InvalidAudio,
        Error::Shape(_) => SedStatus::Shape,
        Error::NonFinite(_) => SedStatus::NonFinite,
        _ => SedStatus::Other,
    }
}

struct Fail(SedStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SedStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside sedtriadv".into());
            SedStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SedStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SedStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn sed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a run directory. `checkpoint` may be null for `final.ckpt`.
///
/// # Safety
/// `dir` and a non-null `checkpoint` must be NUL-terminated strings; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn sed_run_load(dir: *const c_char, checkpoint: *const c_char, out: *mut *mut SedRun) -> SedStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = str_arg(dir, "dir")?;
        let ckpt = if checkpoint.is_null() {
            FINAL_CKPT
        } else {
            str_arg(checkpoint, "checkpoint")?
        };
        let run = LoadedRun::load(Path::new(dir), ckpt)?;
        let class_names = run
            .record
            .class_names
            .iter()
            .map(|n| CString::new(n.as_str()).map_err(|_| Fail(SedStatus::Config, format!("class name {n:?} has a NUL"))))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(SedRun { run, class_names }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`sed_run_load`] and not be freed twice. Null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn sed_run_free(run: *mut SedRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sed_run_n_classes(run: *const SedRun, out: *mut usize) -> SedStatus {
    guard(|| {
        let r = handle(run, "run")?;
        *out.as_mut().ok_or_else(|| null("out"))? = r.class_names.len();
        Ok(())
    })
}

/// Name of class `k`, owned by the run handle.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sed_run_class_name(run: *const SedRun, k: usize, out: *mut *const c_char) -> SedStatus {
    guard(|| {
        let r = handle(run, "run")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let name = r
            .class_names
            .get(k)
            .ok_or_else(|| Fail(SedStatus::OutOfRange, format!("class {k} of {}", r.class_names.len())))?;
        *out = name.as_ptr();
        Ok(())
    })
}

/// Runs the front-end, the target classifier and the decoder on mono
/// samples in [-1, 1] at `sample_rate_hz`.
///
/// # Safety
/// `run` must be a live handle; `samples` must point to `n_samples` floats;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sed_run_predict(
    run: *const SedRun,
    samples: *const f32,
    n_samples: usize,
    sample_rate_hz: u32,
    out: *mut *mut SedPrediction,
) -> SedStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let r = handle(run, "run")?;
        if samples.is_null() {
            return Err(null("samples"));
        }
        let clip = AudioClip::new(std::slice::from_raw_parts(samples, n_samples).to_vec(), sample_rate_hz)?;
        let spec = log_mel(&clip, &r.run.record.frontend)?;
        let pred = r.run.predict(std::slice::from_ref(&spec))?.remove(0);
        let events = decode(&pred, &r.run.record.decode)
            .into_iter()
            .map(|e| SedEvent {
                class_id: e.class_id as u32,
                onset_s: e.onset_s,
                offset_s: e.offset_s,
            })
            .collect();
        *out = Box::into_raw(Box::new(SedPrediction { pred, events }));
        Ok(())
    })
}

/// # Safety
/// `pred` must come from [`sed_run_predict`] and not be freed twice. Null
/// is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sed_prediction_free(pred: *mut SedPrediction) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// # Safety
/// `pred` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sed_prediction_n_events(pred: *const SedPrediction, out: *mut usize) -> SedStatus {
    guard(|| {
        let p = handle(pred, "prediction")?;
        *out.as_mut().ok_or_else(|| null("out"))? = p.events.len();
        Ok(())
    })
}

/// # Safety
/// `pred` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sed_prediction_event(pred: *const SedPrediction, i: usize, out: *mut SedEvent) -> SedStatus {
    guard(|| {
        let p = handle(pred, "prediction")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = *p
            .events
            .get(i)
            .ok_or_else(|| Fail(SedStatus::OutOfRange, format!("event {i} of {}", p.events.len())))?;
        Ok(())
    })
}

/// Frame count, class count and frame hop (seconds) of the probabilities.
///
/// # Safety
/// `pred` must be a live handle; each non-null output must be writable.
#[no_mangle]
pub unsafe extern "C" fn sed_prediction_shape(
    pred: *const SedPrediction,
    n_frames: *mut usize,
    n_classes: *mut usize,
    frame_hop_s: *mut f64,
) -> SedStatus {
    guard(|| {
        let p = handle(pred, "prediction")?;
        if let Some(o) = n_frames.as_mut() {
            *o = p.pred.n_frames;
        }
        if let Some(o) = n_classes.as_mut() {
            *o = p.pred.n_classes;
        }
        if let Some(o) = frame_hop_s.as_mut() {
            *o = p.pred.frame_hop_s;
        }
        Ok(())
    })
}

/// Copies row-major `[n_frames, n_classes]` frame probabilities into `buf`.
///
/// # Safety
/// `pred` must be a live handle; `buf` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn sed_prediction_frame_probs(pred: *const SedPrediction, buf: *mut f32, cap: usize) -> SedStatus {
    guard(|| {
        let p = handle(pred, "prediction")?;
        let need = p.pred.frame_probs.len();
        if cap < need {
            return Err(Fail(SedStatus::BufferTooSmall, format!("need {need} floats, got {cap}")));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(p.pred.frame_probs.as_ptr(), buf, need);
        Ok(())
    })
}

/// Copies the `n_classes` clip probabilities into `buf`.
///
/// # Safety
/// `pred` must be a live handle; `buf` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn sed_prediction_clip_probs(pred: *const SedPrediction, buf: *mut f32, cap: usize) -> SedStatus {
    guard(|| {
        let p = handle(pred, "prediction")?;
        let need = p.pred.clip_probs.len();
        if cap < need {
            return Err(Fail(SedStatus::BufferTooSmall, format!("need {need} floats, got {cap}")));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(p.pred.clip_probs.as_ptr(), buf, need);
        Ok(())
    })
}
