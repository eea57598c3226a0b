//! Dense tensor aliases and the validated source-image type.
//!
//! Videos are `(frames, channels, height, width)` in `f32`; masks are
//! boolean. Content hashes are SHA-256 over the shape followed by the
//! little-endian element bytes in logical (row-major) order, so they are
//! independent of memory layout.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Result, TtmError};

pub type Mask = Array2<bool>;
pub type MaskVideo = Array3<bool>;
pub type Video = Array4<f32>;

pub const MIN_SIDE: usize = 8;

/// An RGB image with values in `[0, 1]`, shape `(3, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceImage {
    pixels: Array3<f32>,
}

impl SourceImage {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        let mut errs = Vec::new();
        if c != 3 {
            errs.push(format!("image must have 3 channels, got {c}"));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            errs.push(format!("image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            errs.push("pixel values must be finite and within [0,1]".into());
        }
        if errs.is_empty() {
            Ok(Self { pixels })
        } else {
            Err(TtmError::Validation(errs))
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.pixels.view()
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.pixels
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let mut pixels = Array3::<f32>::zeros((3, h as usize, w as usize));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[[c, y as usize, x as usize]] = p[c] as f32 / 255.0;
            }
        }
        Self::new(pixels)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn content_hash(&self) -> String {
        hash_f32(self.pixels.shape(), self.pixels.iter().copied())
    }
}

/// Quantizes a `(3, H, W)` view to 8-bit RGB (round half up, clamped).
pub fn to_rgb8(frame: ArrayView3<'_, f32>) -> RgbImage {
    let (_, h, w) = frame.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| {
            let v = frame[[c, y as usize, x as usize]].clamp(0.0, 1.0);
            (v * 255.0 + 0.5).floor() as u8
        };
        Rgb([q(0), q(1), q(2)])
    })
}

pub fn mask_to_luma8(mask: &Mask) -> image::GrayImage {
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    })
}

pub fn mask_from_luma8(img: &image::GrayImage) -> Mask {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] >= 128)
}

pub fn hash_f32(shape: &[usize], values: impl Iterator<Item = f32>) -> String {
    let mut hasher = Sha256::new();
    for d in shape {
        hasher.update((*d as u64).to_le_bytes());
    }
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

pub fn hash_bool(shape: &[usize], values: impl Iterator<Item = bool>) -> String {
    let mut hasher = Sha256::new();
    for d in shape {
        hasher.update((*d as u64).to_le_bytes());
    }
    for v in values {
        hasher.update([v as u8]);
    }
    hex::encode(hasher.finalize())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn video_hash(video: &Video) -> String {
    hash_f32(video.shape(), video.iter().copied())
}

pub fn mask_video_hash(mask: &MaskVideo) -> String {
    hash_bool(mask.shape(), mask.iter().copied())
}

/// Stacks `count` copies of an image into a `(count, 3, H, W)` video.
pub fn repeat_frames(image: &SourceImage, count: usize) -> Video {
    let img = image.pixels();
    let (c, h, w) = img.dim();
    let mut out = Video::zeros((count, c, h, w));
    for mut frame in out.axis_iter_mut(Axis(0)) {
        frame.assign(img);
    }
    out
}

pub fn mask_count(mask: &Mask) -> usize {
    mask.iter().filter(|m| **m).count()
}

/// Centroid `(x, y)` of the set pixels, or `None` for an empty mask.
pub fn mask_centroid(mask: &Mask) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}
