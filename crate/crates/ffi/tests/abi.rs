use std::ffi::{CStr, CString};
use std::ptr;

use ndarray::{Array2, Array3};
use ttm_core::diffusion::{GaussianDenoiser, NoiseSchedule, ScheduleKind};
use ttm_core::motion::{build_warped_reference, Keyframe, MotionSpec, MotionSpecDocument};
use ttm_core::sampler::{guidance_for, sample, NoObserver, SamplerConfig};
use ttm_core::tensor::{video_hash, SourceImage};
use ttm_ffi::*;

const H: usize = 12;
const W: usize = 14;

fn pixels() -> Array3<f32> {
    Array3::from_shape_fn((3, H, W), |(c, y, x)| ((x * 13 + y * 7 + c * 50) % 256) as f32 / 255.0)
}

fn spec() -> MotionSpec {
    let mask = Array2::from_shape_fn((H, W), |(y, x)| (3..7).contains(&y) && (4..8).contains(&x));
    MotionSpec::single(mask, vec![Keyframe::at(0), Keyframe::translate(3, 3.0, 1.0)], 4)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ttm_last_error_message()) }.to_string_lossy().into_owned()
}

fn hash_of(f: impl Fn(*mut std::ffi::c_char, usize) -> usize) -> String {
    let need = f(ptr::null_mut(), 0);
    let mut buf = vec![0 as std::ffi::c_char; need];
    assert_eq!(f(buf.as_mut_ptr(), need), need);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

struct Handles {
    image: *mut TtmImage,
    spec: *mut TtmMotionSpec,
    reference: *mut TtmReference,
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            ttm_reference_free(self.reference);
            ttm_spec_free(self.spec);
            ttm_image_free(self.image);
        }
    }
}

fn warp() -> Handles {
    let mut h = Handles { image: ptr::null_mut(), spec: ptr::null_mut(), reference: ptr::null_mut() };
    let px = pixels();
    let json = CString::new(MotionSpecDocument::from_spec(&spec(), None).to_json()).unwrap();
    unsafe {
        assert_eq!(ttm_image_new(px.as_ptr(), H, W, &mut h.image), TtmStatus::Ok);
        assert_eq!(ttm_spec_from_json(json.as_ptr(), &mut h.spec), TtmStatus::Ok);
        assert_eq!(ttm_warp(h.image, h.spec, &mut h.reference), TtmStatus::Ok, "{}", last_error());
    }
    h
}

#[test]
fn warp_matches_library() {
    let h = warp();
    let expected = build_warped_reference(&SourceImage::new(pixels()).unwrap(), &spec()).unwrap();
    let mut dims = TtmDims::default();
    unsafe {
        assert_eq!(ttm_reference_dims(h.reference, &mut dims), TtmStatus::Ok);
        assert_eq!(dims, TtmDims { frames: 4, channels: 3, height: H, width: W });
        let mut frames = vec![0f32; 4 * 3 * H * W];
        assert_eq!(ttm_reference_frames(h.reference, frames.as_mut_ptr(), frames.len()), TtmStatus::Ok);
        assert_eq!(frames, expected.frames.iter().copied().collect::<Vec<_>>());
        let mut mask = vec![9u8; 4 * H * W];
        assert_eq!(ttm_reference_mask(h.reference, mask.as_mut_ptr(), mask.len()), TtmStatus::Ok);
        assert_eq!(mask, expected.mask.iter().map(|&b| b as u8).collect::<Vec<_>>());
        let hash = hash_of(|b, n| ttm_reference_content_hash(h.reference, b, n));
        assert_eq!(hash, expected.content_hash());
    }
}

#[test]
fn sampling_matches_library() {
    let h = warp();
    let cfg = TtmSamplerConfig { t_weak: 20, t_strong: 12, regime: TtmRegime::DualClock, seed: 5, shared_epsilon: 0 };
    let mut den = ptr::null_mut();
    let mut video = ptr::null_mut();
    unsafe {
        assert_eq!(ttm_denoiser_gaussian(0.5, 0.05, 40, &mut den), TtmStatus::Ok);
        assert_eq!(ttm_denoiser_steps(den), 40);
        assert_eq!(ttm_sample(den, h.reference, h.image, &cfg, &mut video), TtmStatus::Ok, "{}", last_error());
        let mut dims = TtmDims::default();
        assert_eq!(ttm_video_dims(video, &mut dims), TtmStatus::Ok);
        let mut data = vec![0f32; dims.frames * dims.channels * dims.height * dims.width];
        assert_eq!(ttm_video_data(video, data.as_mut_ptr(), data.len()), TtmStatus::Ok);
        let hash = hash_of(|b, n| ttm_video_hash(video, b, n));

        let img = SourceImage::new(pixels()).unwrap();
        let r = build_warped_reference(&img, &spec()).unwrap();
        let d = GaussianDenoiser::new(0.5, 0.05, NoiseSchedule::new(ScheduleKind::Cosine, 40).unwrap()).unwrap();
        let mask = guidance_for(&r.mask, &r.frames).unwrap();
        let expected =
            sample(&d, &r.frames, &mask, &SamplerConfig::dual_clock(20, 12, 5), &img, None, &mut NoObserver).unwrap();
        assert_eq!(data, expected.iter().copied().collect::<Vec<_>>());
        assert_eq!(hash, video_hash(&expected));
        ttm_video_free(video);
        ttm_denoiser_free(den);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let mut image = ptr::null_mut();
    let mut spec = ptr::null_mut();
    let bad = CString::new("{not json").unwrap();
    let missing = CString::new("/nonexistent/ttm/source.png").unwrap();
    unsafe {
        assert_eq!(ttm_image_new(ptr::null(), H, W, &mut image), TtmStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(ttm_spec_from_json(bad.as_ptr(), &mut spec), TtmStatus::InvalidArgument);
        assert!(spec.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(ttm_image_load(missing.as_ptr(), &mut image), TtmStatus::Io);
        assert!(image.is_null());
        let px = vec![2.0f32; 3 * H * W];
        assert_ne!(ttm_image_new(px.as_ptr(), H, W, &mut image), TtmStatus::Ok);
        assert_eq!(ttm_warp(ptr::null(), ptr::null(), ptr::null_mut()), TtmStatus::NullPointer);
    }
}

#[test]
fn success_clears_last_error() {
    let mut image = ptr::null_mut();
    unsafe {
        ttm_image_new(ptr::null(), H, W, &mut image);
        assert!(!last_error().is_empty());
        let px = pixels();
        assert_eq!(ttm_image_new(px.as_ptr(), H, W, &mut image), TtmStatus::Ok);
        assert_eq!(last_error(), "");
        let (mut h, mut w) = (0, 0);
        assert_eq!(ttm_image_dims(image, &mut h, &mut w), TtmStatus::Ok);
        assert_eq!((h, w), (H, W));
        ttm_image_free(image);
    }
}

#[test]
fn short_buffers_are_rejected() {
    let h = warp();
    let mut small = vec![0f32; 10];
    unsafe {
        assert_eq!(ttm_reference_frames(h.reference, small.as_mut_ptr(), small.len()), TtmStatus::BufferTooSmall);
        let need = ttm_reference_content_hash(h.reference, ptr::null_mut(), 0);
        assert_eq!(need, 65);
        let mut buf = [7 as std::ffi::c_char; 8];
        assert_eq!(ttm_reference_content_hash(h.reference, buf.as_mut_ptr(), buf.len()), 65);
        assert!(buf.iter().all(|&c| c == 7));
    }
}

#[test]
fn invalid_sampler_config_is_rejected() {
    let h = warp();
    let cfg = TtmSamplerConfig { t_weak: 10, t_strong: 30, regime: TtmRegime::DualClock, seed: 0, shared_epsilon: 0 };
    let mut den = ptr::null_mut();
    let mut video = ptr::null_mut();
    unsafe {
        ttm_denoiser_gaussian(0.5, 0.05, 40, &mut den);
        assert_eq!(ttm_sample(den, h.reference, h.image, &cfg, &mut video), TtmStatus::InvalidArgument);
        assert!(video.is_null());
        assert!(last_error().contains("t_strong"));
        ttm_denoiser_free(den);
    }
}

#[test]
fn free_accepts_null() {
    unsafe {
        ttm_image_free(ptr::null_mut());
        ttm_spec_free(ptr::null_mut());
        ttm_reference_free(ptr::null_mut());
        ttm_denoiser_free(ptr::null_mut());
        ttm_video_free(ptr::null_mut());
    }
    assert_eq!(unsafe { ttm_denoiser_steps(ptr::null()) }, 0);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(ttm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ttm.h")).unwrap();
    for name in [
        "ttm_last_error_message",
        "ttm_image_new",
        "ttm_warp",
        "ttm_sample",
        "ttm_video_free",
        "typedef struct TtmReference TtmReference",
        "TTM_STATUS_BUFFER_TOO_SMALL",
        "TtmSamplerConfig",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-"])
        .arg(format!("-I{}/include", env!("CARGO_MANIFEST_DIR")))
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut child| {
            use std::io::Write;
            child.stdin.take().unwrap().write_all(b"#include \"ttm.h\"\nint main(void){return 0;}\n")?;
            child.wait_with_output()
        })
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
