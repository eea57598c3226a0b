//! C ABI over `ttm-core`.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `ttm_*_new`/`ttm_*_load` function and released by the matching
//! `ttm_*_free`. Fallible calls return a [`TtmStatus`]; on failure the
//! message is available from [`ttm_last_error_message`] on the same thread.
//! Videos are `float` arrays in `(frames, channels, height, width)` order
//! with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ndarray::Array3;
use ttm_core::diffusion::toy::ToyModel;
use ttm_core::diffusion::{Denoiser, GaussianDenoiser, NoiseSchedule, ScheduleKind};
use ttm_core::motion::{build_warped_reference, MotionSpecDocument, WarpedReference};
use ttm_core::sampler::{guidance_for, sample, NoObserver, ReferenceNoiseMode, Regime, SamplerConfig};
use ttm_core::tensor::{video_hash, SourceImage, Video};
use ttm_core::TtmError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Diverged = 6,
    BufferTooSmall = 7,
    Internal = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtmRegime {
    DualClock = 0,
    SingleClock = 1,
    RepaintStyle = 2,
    UnconstrainedBg = 3,
}

/// Sampler settings. `shared_epsilon` nonzero reuses the initialization
/// noise for the reference instead of drawing fresh noise per step.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TtmSamplerConfig {
    pub t_weak: usize,
    pub t_strong: usize,
    pub regime: TtmRegime,
    pub seed: u64,
    pub shared_epsilon: u8,
}

/// Dimensions of a video in `(frames, channels, height, width)` order.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TtmDims {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub struct TtmImage(SourceImage);
pub struct TtmMotionSpec(MotionSpecDocument);
pub struct TtmReference(WarpedReference);
pub struct TtmDenoiser(Box<dyn Denoiser>);
pub struct TtmVideo(Video);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &TtmError) -> TtmStatus {
    match err {
        TtmError::Validation(_) | TtmError::Json(_) | TtmError::Image(_) | TtmError::Degenerate(_) => {
            TtmStatus::InvalidArgument
        }
        TtmError::Shape(_) => TtmStatus::ShapeMismatch,
        TtmError::Io(_) => TtmStatus::Io,
        TtmError::Checkpoint(_) => TtmStatus::Checkpoint,
        TtmError::Diverged { .. } => TtmStatus::Diverged,
        TtmError::TrackLost { .. } => TtmStatus::Internal,
    }
}

struct Fail(TtmStatus, String);

impl From<TtmError> for Fail {
    fn from(e: TtmError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TtmStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TtmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TtmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            TtmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(TtmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<T>(slot: *mut *mut T, value: T) -> Result<(), Fail> {
    if slot.is_null() {
        return Err(null("output pointer"));
    }
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies `text` plus a terminating NUL into `buf` when it fits. Returns the
/// required size including the NUL either way.
unsafe fn write_str(text: &str, buf: *mut c_char, len: usize) -> usize {
    let need = text.len() + 1;
    if !buf.is_null() && len >= need {
        ptr::copy_nonoverlapping(text.as_ptr() as *const c_char, buf, text.len());
        *buf.add(text.len()) = 0;
    }
    need
}

unsafe fn copy_f32(src: &[f32], buf: *mut f32, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if len < src.len() {
        return Err(Fail(TtmStatus::BufferTooSmall, format!("need {} floats, got {len}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

fn dims(v: &Video) -> TtmDims {
    let (frames, channels, height, width) = v.dim();
    TtmDims { frames, channels, height, width }
}

/// The message of the last failed call on this thread; empty after a
/// successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ttm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ttm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `data` must point to `3 * height * width` floats in `(3, H, W)` order.
#[no_mangle]
pub unsafe extern "C" fn ttm_image_new(
    data: *const f32,
    height: usize,
    width: usize,
    out_image: *mut *mut TtmImage,
) -> TtmStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = 3usize
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Fail(TtmStatus::InvalidArgument, "image size overflows".into()))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let pixels = Array3::from_shape_vec((3, height, width), values)
            .map_err(|e| Fail(TtmStatus::ShapeMismatch, e.to_string()))?;
        out(out_image, TtmImage(SourceImage::new(pixels)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ttm_image_load(path: *const c_char, out_image: *mut *mut TtmImage) -> TtmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        out(out_image, TtmImage(SourceImage::load(path)?))
    })
}

/// # Safety
/// `image` must come from `ttm_image_new` or `ttm_image_load`.
#[no_mangle]
pub unsafe extern "C" fn ttm_image_dims(image: *const TtmImage, height: *mut usize, width: *mut usize) -> TtmStatus {
    guard(|| {
        let img = obj(image, "image")?;
        if height.is_null() || width.is_null() {
            return Err(null("output pointer"));
        }
        *height = img.0.height();
        *width = img.0.width();
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn ttm_image_free(image: *mut TtmImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Parses and validates the JSON motion spec document.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ttm_spec_from_json(json: *const c_char, out_spec: *mut *mut TtmMotionSpec) -> TtmStatus {
    guard(|| {
        let doc = MotionSpecDocument::from_json(str_arg(json, "json")?)?;
        doc.to_spec()?;
        out(out_spec, TtmMotionSpec(doc))
    })
}

/// # Safety
/// `spec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ttm_spec_free(spec: *mut TtmMotionSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Builds the warped reference video and mask.
///
/// # Safety
/// Handles must be live.
#[no_mangle]
pub unsafe extern "C" fn ttm_warp(
    image: *const TtmImage,
    spec: *const TtmMotionSpec,
    out_reference: *mut *mut TtmReference,
) -> TtmStatus {
    guard(|| {
        let img = &obj(image, "image")?.0;
        let spec = obj(spec, "spec")?.0.to_spec()?;
        spec.validate(img.height(), img.width())?;
        out(out_reference, TtmReference(build_warped_reference(img, &spec)?))
    })
}

/// # Safety
/// `reference` must be a live handle; `out_dims` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttm_reference_dims(reference: *const TtmReference, out_dims: *mut TtmDims) -> TtmStatus {
    guard(|| {
        let r = obj(reference, "reference")?;
        *out_dims.as_mut().ok_or_else(|| null("out_dims"))? = dims(&r.0.frames);
        Ok(())
    })
}

/// Copies the reference frames into `buf` (`frames * 3 * H * W` floats).
///
/// # Safety
/// `buf` must have room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ttm_reference_frames(reference: *const TtmReference, buf: *mut f32, len: usize) -> TtmStatus {
    guard(|| {
        let r = obj(reference, "reference")?;
        copy_f32(&r.0.frames.iter().copied().collect::<Vec<_>>(), buf, len)
    })
}

/// Copies the mask video into `buf` (`frames * H * W` bytes, 0 or 1).
///
/// # Safety
/// `buf` must have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ttm_reference_mask(reference: *const TtmReference, buf: *mut u8, len: usize) -> TtmStatus {
    guard(|| {
        let r = obj(reference, "reference")?;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        let m = &r.0.mask;
        if len < m.len() {
            return Err(Fail(TtmStatus::BufferTooSmall, format!("need {} bytes, got {len}", m.len())));
        }
        for (i, v) in m.iter().enumerate() {
            *buf.add(i) = *v as u8;
        }
        Ok(())
    })
}

/// Writes the reference content hash (hex, NUL-terminated) into `buf` when
/// `len` suffices; returns the required size, or 0 for a null handle.
///
/// # Safety
/// `buf` must be null or have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ttm_reference_content_hash(
    reference: *const TtmReference,
    buf: *mut c_char,
    len: usize,
) -> usize {
    match reference.as_ref() {
        Some(r) => write_str(&r.0.content_hash(), buf, len),
        None => 0,
    }
}

/// # Safety
/// `reference` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ttm_reference_free(reference: *mut TtmReference) {
    if !reference.is_null() {
        drop(Box::from_raw(reference));
    }
}

/// Loads a toy denoiser checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ttm_denoiser_load_toy(path: *const c_char, out_denoiser: *mut *mut TtmDenoiser) -> TtmStatus {
    guard(|| {
        let model = ToyModel::load(str_arg(path, "path")?)?;
        out(out_denoiser, TtmDenoiser(Box::new(model)))
    })
}

/// The analytic denoiser for i.i.d. Gaussian data on a cosine schedule.
///
/// # Safety
/// `out_denoiser` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttm_denoiser_gaussian(
    mean: f64,
    variance: f64,
    steps: usize,
    out_denoiser: *mut *mut TtmDenoiser,
) -> TtmStatus {
    guard(|| {
        let schedule = NoiseSchedule::new(ScheduleKind::Cosine, steps)?;
        out(out_denoiser, TtmDenoiser(Box::new(GaussianDenoiser::new(mean, variance, schedule)?)))
    })
}

/// Number of diffusion steps `T` of the denoiser's schedule, or 0 for null.
///
/// # Safety
/// `denoiser` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ttm_denoiser_steps(denoiser: *const TtmDenoiser) -> usize {
    denoiser.as_ref().map_or(0, |d| d.0.schedule().steps)
}

/// # Safety
/// `denoiser` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ttm_denoiser_free(denoiser: *mut TtmDenoiser) {
    if !denoiser.is_null() {
        drop(Box::from_raw(denoiser));
    }
}

fn sampler_config(c: &TtmSamplerConfig) -> SamplerConfig {
    let regime = match c.regime {
        TtmRegime::DualClock => Regime::DualClock,
        TtmRegime::SingleClock => Regime::SingleClock,
        TtmRegime::RepaintStyle => Regime::RepaintStyle,
        TtmRegime::UnconstrainedBg => Regime::UnconstrainedBg,
    };
    let mode = if c.shared_epsilon != 0 { ReferenceNoiseMode::SharedEpsilon } else { ReferenceNoiseMode::FreshPerStep };
    SamplerConfig { t_weak: c.t_weak, t_strong: c.t_strong, regime, seed: c.seed, reference_noise_mode: mode }
}

/// Dual-clock sampling guided by `reference`, conditioned on `image`.
///
/// # Safety
/// Handles must be live; `config` must be readable.
#[no_mangle]
pub unsafe extern "C" fn ttm_sample(
    denoiser: *const TtmDenoiser,
    reference: *const TtmReference,
    image: *const TtmImage,
    config: *const TtmSamplerConfig,
    out_video: *mut *mut TtmVideo,
) -> TtmStatus {
    guard(|| {
        let d = &obj(denoiser, "denoiser")?.0;
        let r = &obj(reference, "reference")?.0;
        let img = &obj(image, "image")?.0;
        let cfg = sampler_config(obj(config, "config")?);
        cfg.validate(d.schedule().steps)?;
        let mask = guidance_for(&r.mask, &r.frames)?;
        let video = sample(d.as_ref(), &r.frames, &mask, &cfg, img, None, &mut NoObserver)?;
        out(out_video, TtmVideo(video))
    })
}

/// # Safety
/// `video` must be a live handle; `out_dims` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttm_video_dims(video: *const TtmVideo, out_dims: *mut TtmDims) -> TtmStatus {
    guard(|| {
        let v = obj(video, "video")?;
        *out_dims.as_mut().ok_or_else(|| null("out_dims"))? = dims(&v.0);
        Ok(())
    })
}

/// # Safety
/// `buf` must have room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ttm_video_data(video: *const TtmVideo, buf: *mut f32, len: usize) -> TtmStatus {
    guard(|| {
        let v = obj(video, "video")?;
        copy_f32(&v.0.iter().copied().collect::<Vec<_>>(), buf, len)
    })
}

/// Content hash of the video, as recorded in run manifests. Same buffer
/// protocol as `ttm_reference_content_hash`.
///
/// # Safety
/// `buf` must be null or have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ttm_video_hash(video: *const TtmVideo, buf: *mut c_char, len: usize) -> usize {
    match video.as_ref() {
        Some(v) => write_str(&video_hash(&v.0), buf, len),
        None => 0,
    }
}

/// # Safety
/// `video` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ttm_video_free(video: *mut TtmVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}
