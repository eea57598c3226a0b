//! Cut-and-drag motion signals: a source image plus keyframed rigid motions
//! of user-selected regions becomes a crude warped reference video and the
//! matching per-frame mask video.

mod inpaint;
mod spec_io;
mod trajectory;
mod warp;

pub use inpaint::{nn_inpaint, nn_inpaint_excluding};
pub use spec_io::{MaskRle, MotionSpecDocument, SPEC_FORMAT_VERSION};
pub use trajectory::{rasterize_trajectory, FrameTransform};
pub use warp::{build_warped_reference, forward_warp, WarpResult, WarpedReference};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtmError};
use crate::tensor::{mask_centroid, mask_count, Mask};

pub const MIN_SCALE: f64 = 0.05;
pub const MAX_SCALE: f64 = 20.0;

/// Affine color map `clamp(matrix * rgb + offset, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTransform {
    pub matrix: [[f32; 3]; 3],
    pub offset: [f32; 3],
}

impl Default for ColorTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl ColorTransform {
    pub const IDENTITY: Self = Self {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        offset: [0.0; 3],
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply(&self, rgb: [f32; 3]) -> [f32; 3] {
        let mut out = [0.0f32; 3];
        for (r, o) in out.iter_mut().enumerate() {
            let m = &self.matrix[r];
            *o = (m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2] + self.offset[r]).clamp(0.0, 1.0);
        }
        out
    }

    /// `(1-u)*self + u*other`, elementwise; exact at both endpoints.
    pub fn lerp(&self, other: &Self, u: f32) -> Self {
        let mix = |a: f32, b: f32| (1.0 - u) * a + u * b;
        let mut out = *self;
        for r in 0..3 {
            for c in 0..3 {
                out.matrix[r][c] = mix(self.matrix[r][c], other.matrix[r][c]);
            }
            out.offset[r] = mix(self.offset[r], other.offset[r]);
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.matrix.iter().flatten().chain(self.offset.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: usize,
    #[serde(default)]
    pub dx: f64,
    #[serde(default)]
    pub dy: f64,
    /// Radians, counter-clockwise in image coordinates (y down).
    #[serde(default)]
    pub rotation: f64,
    #[serde(default)]
    pub log_scale: f64,
}

impl Keyframe {
    pub fn at(frame: usize) -> Self {
        Self { frame, dx: 0.0, dy: 0.0, rotation: 0.0, log_scale: 0.0 }
    }

    pub fn translate(frame: usize, dx: f64, dy: f64) -> Self {
        Self { dx, dy, ..Self::at(frame) }
    }

    pub fn is_identity(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.rotation == 0.0 && self.log_scale == 0.0
    }
}

/// One moved region: its frame-0 mask, keyframed motion and optional
/// per-keyframe color override.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub mask: Mask,
    pub keyframes: Vec<Keyframe>,
    pub appearance_override: Option<Vec<ColorTransform>>,
}

impl Region {
    pub fn new(mask: Mask, keyframes: Vec<Keyframe>) -> Self {
        Self { mask, keyframes, appearance_override: None }
    }

    pub fn with_override(mut self, colors: Vec<ColorTransform>) -> Self {
        self.appearance_override = Some(colors);
        self
    }

    /// Pivot for rotation and scaling: the centroid of the frame-0 mask.
    pub fn pivot(&self) -> (f64, f64) {
        mask_centroid(&self.mask).unwrap_or((0.0, 0.0))
    }
}

/// Declarative motion intent. Regions are composed in declaration order;
/// later regions splat over earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSpec {
    pub frame_count: usize,
    pub regions: Vec<Region>,
}

impl MotionSpec {
    pub fn single(mask: Mask, keyframes: Vec<Keyframe>, frame_count: usize) -> Self {
        Self { frame_count, regions: vec![Region::new(mask, keyframes)] }
    }

    /// A spec that keeps the region still for `frame_count` frames.
    pub fn identity(mask: Mask, frame_count: usize) -> Self {
        let mut keys = vec![Keyframe::at(0)];
        if frame_count > 1 {
            keys.push(Keyframe::at(frame_count - 1));
        }
        Self::single(mask, keys, frame_count)
    }

    /// Checks every invariant against an image of `height x width`,
    /// collecting all violations rather than stopping at the first.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.frame_count == 0 {
            errs.push("frame_count must be at least 1".to_string());
        }
        if self.regions.is_empty() {
            errs.push("spec must contain at least one region".to_string());
        }
        for (ri, region) in self.regions.iter().enumerate() {
            let tag = |m: &str| format!("region {ri}: {m}");
            if region.mask.dim() != (height, width) {
                let (h, w) = region.mask.dim();
                errs.push(tag(&format!("mask is {h}x{w}, image is {height}x{width}")));
            }
            if mask_count(&region.mask) == 0 {
                errs.push(tag("mask has no selected pixels"));
            }
            let keys = &region.keyframes;
            if keys.is_empty() {
                errs.push(tag("no keyframes"));
                continue;
            }
            if keys[0].frame != 0 {
                errs.push(tag("first keyframe must be at frame 0"));
            }
            if self.frame_count > 0 && keys[keys.len() - 1].frame != self.frame_count - 1 {
                errs.push(tag("last keyframe must be at frame_count - 1"));
            }
            if keys.windows(2).any(|w| w[1].frame <= w[0].frame) {
                errs.push(tag("keyframe indices must be strictly increasing"));
            }
            if !keys[0].is_identity() {
                errs.push(tag("keyframe 0 must be the identity transform"));
            }
            for k in keys {
                if ![k.dx, k.dy, k.rotation, k.log_scale].iter().all(|v| v.is_finite()) {
                    errs.push(tag(&format!("keyframe {} has non-finite values", k.frame)));
                    continue;
                }
                let s = k.log_scale.exp();
                if !(s > MIN_SCALE && s < MAX_SCALE) {
                    errs.push(tag(&format!(
                        "keyframe {} scale {s} outside ({MIN_SCALE}, {MAX_SCALE})",
                        k.frame
                    )));
                }
            }
            if let Some(colors) = &region.appearance_override {
                if colors.len() != keys.len() {
                    errs.push(tag("appearance_override needs one transform per keyframe"));
                } else if !colors[0].is_identity() {
                    errs.push(tag("appearance_override at keyframe 0 must be the identity"));
                }
                if colors.iter().any(|c| !c.is_finite()) {
                    errs.push(tag("appearance_override has non-finite values"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TtmError::Validation(errs))
        }
    }
}
