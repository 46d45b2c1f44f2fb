//! C interface to the apesed detector.
//!
//! Every fallible function returns an [`ApesedStatus`]. On failure a
//! human-readable message is kept per thread and can be fetched with
//! [`apesed_last_error`]. Handles are opaque and must be released with
//! their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use apesed::audio::{canonicalize, frame_grid, load_wav};
use apesed::features::{compute_features, read_apef, FeatureKind, FrameMatrix};
use apesed::metrics::{aucpr, to_segments, CallSegment};
use apesed::nn::{Checkpoint, Mat, Mode};
use apesed::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApesedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed or unsupported file contents.
    Format = 4,
    DimMismatch = 5,
    /// Checkpoint does not fit the request.
    Incompatible = 6,
    NoPositives = 7,
    /// Any other data error.
    Data = 8,
    BufferTooSmall = 9,
    /// A Rust panic was caught at the boundary.
    Panic = 10,
}

fn status_of(e: &Error) -> ApesedStatus {
    use ApesedStatus as S;
    match e {
        Error::Io { .. } | Error::MissingFile { .. } => S::Io,
        Error::UnsupportedFormat(..)
        | Error::CorruptFile(..)
        | Error::EmptyAudio(_)
        | Error::BadMagic { .. }
        | Error::Json { .. } => S::Format,
        Error::DimMismatch { .. } | Error::FrameCountMismatch { .. } => S::DimMismatch,
        Error::IncompatibleCheckpoint(_) | Error::FeatureKindMismatch { .. } | Error::ClassArityMismatch { .. } => {
            S::Incompatible
        }
        Error::InvalidArgument(_) | Error::BadConfig(_) | Error::LengthMismatch(_) => S::InvalidArgument,
        Error::NoPositives => S::NoPositives,
        _ => S::Data,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: ApesedStatus, message: impl Into<String>) -> ApesedStatus {
    set_error(message.into());
    status
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), ApesedStatus>) -> ApesedStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ApesedStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(ApesedStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: apesed::Result<T>) -> Result<T, ApesedStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, ApesedStatus> {
    if p.is_null() {
        return Err(fail(ApesedStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(ApesedStatus::InvalidArgument, "path is not valid UTF-8"))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), ApesedStatus> {
    if p.is_null() {
        Err(fail(ApesedStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next apesed call on the same thread.
#[no_mangle]
pub extern "C" fn apesed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn apesed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ------------------------------------------------------------------ models

/// A trained model loaded from a checkpoint.
pub struct ApesedModel {
    checkpoint: Checkpoint,
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn apesed_model_load(path: *const c_char, out: *mut *mut ApesedModel) -> ApesedStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path)?;
        let checkpoint = lift(Checkpoint::load(path))?;
        *out = Box::into_raw(Box::new(ApesedModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`apesed_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn apesed_model_free(model: *mut ApesedModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, including the non-call class. Zero for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apesed_model_num_classes(model: *const ApesedModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.model.config.num_class)
}

/// Feature dimension the model expects per frame. Zero for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apesed_model_input_dim(model: *const ApesedModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.model.config.input_dim)
}

/// Frame posteriors for a row-major `num_frames x dim` feature buffer.
/// `out` receives `num_frames x num_classes` probabilities.
///
/// # Safety
/// `features` must hold `num_frames * dim` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn apesed_model_posteriors(
    model: *const ApesedModel,
    features: *const f32,
    num_frames: usize,
    dim: usize,
    out: *mut f32,
    out_len: usize,
) -> ApesedStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(features, "features")?;
        non_null(out, "out")?;
        let ck = &(*model).checkpoint;
        if num_frames == 0 {
            return Err(fail(ApesedStatus::InvalidArgument, "num_frames must be positive"));
        }
        let k = ck.model.config.num_class;
        if out_len < num_frames * k {
            return Err(fail(
                ApesedStatus::BufferTooSmall,
                format!("output needs {} floats, got {out_len}", num_frames * k),
            ));
        }
        let values = std::slice::from_raw_parts(features, num_frames * dim).to_vec();
        let m = FrameMatrix {
            clip_id: String::new(),
            kind: ck.meta.feature_kind,
            values: Mat::from_vec(num_frames, dim, values),
        };
        let p = lift(ck.model.forward(&m, Mode::Eval))?;
        std::slice::from_raw_parts_mut(out, num_frames * k).copy_from_slice(p.probs.as_slice());
        Ok(())
    })
}

// ---------------------------------------------------------------- segments

/// Detected call segments of one clip.
pub struct ApesedSegments {
    segments: Vec<CallSegment>,
    names: Vec<CString>,
}

/// Runs the model over a WAV file and collects call segments lasting at
/// least `min_dur` seconds. Models on external features are rejected.
///
/// # Safety
/// `model` must be live, `wav_path` nul-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn apesed_detect_wav(
    model: *const ApesedModel,
    wav_path: *const c_char,
    min_dur: f64,
    out: *mut *mut ApesedSegments,
) -> ApesedStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let path = path_arg(wav_path)?;
        if !(min_dur >= 0.0 && min_dur.is_finite()) {
            return Err(fail(ApesedStatus::InvalidArgument, "min_dur must be non-negative"));
        }
        let ck = &(*model).checkpoint;
        let kind = ck.meta.feature_kind;
        if kind == FeatureKind::External {
            return Err(fail(
                ApesedStatus::InvalidArgument,
                "model uses external features; compute posteriors from exported features instead",
            ));
        }
        let clip = lift(load_wav(&path).and_then(|c| canonicalize(&c)))?;
        let grid = lift(frame_grid(&clip))?;
        let m = lift(compute_features(&clip, &grid, kind))?;
        let p = lift(ck.model.forward(&m, Mode::Eval))?;
        let segments = to_segments(&clip.clip_id, &p, min_dur);
        let names = segments
            .iter()
            .map(|s| CString::new(ck.meta.vocab.name(s.label)).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(ApesedSegments { segments, names }));
        Ok(())
    })
}

/// Number of segments. Zero for null.
///
/// # Safety
/// `segs` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apesed_segments_len(segs: *const ApesedSegments) -> usize {
    segs.as_ref().map_or(0, |s| s.segments.len())
}

/// Fields of segment `index`: times in seconds, class index and mean
/// posterior of that class. Any output pointer may be null.
///
/// # Safety
/// `segs` must be live; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn apesed_segments_get(
    segs: *const ApesedSegments,
    index: usize,
    start: *mut f64,
    end: *mut f64,
    label: *mut usize,
    confidence: *mut f64,
) -> ApesedStatus {
    guard(|| {
        non_null(segs, "segments")?;
        let segs = &*segs;
        let s = segs
            .segments
            .get(index)
            .ok_or_else(|| fail(ApesedStatus::InvalidArgument, format!("segment {index} out of range")))?;
        if let Some(p) = start.as_mut() {
            *p = s.start;
        }
        if let Some(p) = end.as_mut() {
            *p = s.end;
        }
        if let Some(p) = label.as_mut() {
            *p = s.label;
        }
        if let Some(p) = confidence.as_mut() {
            *p = s.confidence;
        }
        Ok(())
    })
}

/// Class name of segment `index`, owned by the handle; null when out of
/// range.
///
/// # Safety
/// `segs` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apesed_segments_label_name(segs: *const ApesedSegments, index: usize) -> *const c_char {
    segs.as_ref()
        .and_then(|s| s.names.get(index))
        .map_or(std::ptr::null(), |c| c.as_ptr())
}

/// # Safety
/// `segs` must come from [`apesed_detect_wav`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn apesed_segments_free(segs: *mut ApesedSegments) {
    if !segs.is_null() {
        drop(Box::from_raw(segs));
    }
}

// ---------------------------------------------------------------- features

/// Contents of an APEF feature file.
pub struct ApesedFeatures {
    matrix: FrameMatrix,
}

/// Reads an APEF feature file.
///
/// # Safety
/// `path` must be nul-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn apesed_features_read(path: *const c_char, out: *mut *mut ApesedFeatures) -> ApesedStatus {
    guard(|| {
        non_null(out, "out")?;
        let matrix = lift(read_apef(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(ApesedFeatures { matrix }));
        Ok(())
    })
}

/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apesed_features_num_frames(f: *const ApesedFeatures) -> usize {
    f.as_ref().map_or(0, |f| f.matrix.values.rows())
}

/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apesed_features_dim(f: *const ApesedFeatures) -> usize {
    f.as_ref().map_or(0, |f| f.matrix.values.cols())
}

/// Row-major frame values, owned by the handle.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apesed_features_data(f: *const ApesedFeatures) -> *const f32 {
    f.as_ref().map_or(std::ptr::null(), |f| f.matrix.values.as_slice().as_ptr())
}

/// # Safety
/// `f` must come from [`apesed_features_read`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn apesed_features_free(f: *mut ApesedFeatures) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

// ----------------------------------------------------------------- metrics

/// Average precision of `scores` against 0/1 `positives`.
///
/// # Safety
/// Both arrays must hold `n` elements and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn apesed_aucpr(
    scores: *const f64,
    positives: *const u8,
    n: usize,
    out: *mut f64,
) -> ApesedStatus {
    guard(|| {
        non_null(out, "out")?;
        if n > 0 {
            non_null(scores, "scores")?;
            non_null(positives, "positives")?;
        }
        let (s, p): (&[f64], &[u8]) = if n == 0 {
            (&[], &[])
        } else {
            (std::slice::from_raw_parts(scores, n), std::slice::from_raw_parts(positives, n))
        };
        let pos: Vec<bool> = p.iter().map(|&b| b != 0).collect();
        *out = lift(aucpr(s, &pos))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::NoPositives), ApesedStatus::NoPositives);
        assert_eq!(status_of(&Error::DimMismatch { expected: 1, found: 2 }), ApesedStatus::DimMismatch);
        assert_eq!(status_of(&Error::UnknownClip("x".into())), ApesedStatus::Data);
        assert_eq!(
            status_of(&Error::ClassArityMismatch { expected: 2, found: 3 }),
            ApesedStatus::Incompatible
        );
    }

    #[test]
    fn errors_are_recorded_and_cleared() {
        let mut v = 0.0;
        let s = unsafe { apesed_aucpr([0.5].as_ptr(), [0u8].as_ptr(), 1, &mut v) };
        assert_eq!(s, ApesedStatus::NoPositives);
        assert!(!apesed_last_error().is_null());
        let s = unsafe { apesed_aucpr([0.5].as_ptr(), [1u8].as_ptr(), 1, &mut v) };
        assert_eq!(s, ApesedStatus::Ok);
        assert!(apesed_last_error().is_null());
        assert_eq!(v, 1.0);
    }

    #[test]
    fn null_handles_are_harmless() {
        unsafe {
            assert_eq!(apesed_model_num_classes(std::ptr::null()), 0);
            assert_eq!(apesed_segments_len(std::ptr::null()), 0);
            assert!(apesed_features_data(std::ptr::null()).is_null());
            apesed_model_free(std::ptr::null_mut());
            apesed_segments_free(std::ptr::null_mut());
            apesed_features_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn version_is_package_version() {
        let v = unsafe { CStr::from_ptr(apesed_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
