use super::{ColorTransform, Region};
use crate::error::{Result, TtmError};

/// Rigid motion of one region at one frame:
/// `p -> pivot + (dx, dy) + scale * R(rotation) * (p - pivot)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTransform {
    pub dx: f64,
    pub dy: f64,
    pub rotation: f64,
    pub scale: f64,
    pub pivot: (f64, f64),
    pub color: Option<ColorTransform>,
}

impl FrameTransform {
    pub fn identity(pivot: (f64, f64)) -> Self {
        Self { dx: 0.0, dy: 0.0, rotation: 0.0, scale: 1.0, pivot, color: None }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { dx, dy, ..Self::identity((0.0, 0.0)) }
    }

    pub fn is_identity(&self) -> bool {
        self.dx == 0.0
            && self.dy == 0.0
            && self.rotation == 0.0
            && self.scale == 1.0
            && self.color.is_none_or(|c| c.is_identity())
    }

    pub fn is_finite(&self) -> bool {
        [self.dx, self.dy, self.rotation, self.scale, self.pivot.0, self.pivot.1]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (px, py) = self.pivot;
        let (rx, ry) = (x - px, y - py);
        if self.rotation == 0.0 && self.scale == 1.0 {
            return (x + self.dx, y + self.dy);
        }
        let (s, c) = self.rotation.sin_cos();
        let k = self.scale;
        (
            px + self.dx + k * (c * rx - s * ry),
            py + self.dy + k * (s * rx + c * ry),
        )
    }
}

/// Interpolates `a` at frame `fa` and `b` at frame `fb` to frame `f` as a
/// weighted average of the endpoints, which is exact at integer steps.
fn interp(a: f64, b: f64, fa: usize, fb: usize, f: usize) -> f64 {
    if f == fa {
        return a;
    }
    if f == fb {
        return b;
    }
    let span = (fb - fa) as f64;
    (a * (fb - f) as f64 + b * (f - fa) as f64) / span
}

/// Expands the region's keyframes into one transform per frame.
/// Translation and rotation interpolate linearly, scale geometrically.
pub fn rasterize_trajectory(region: &Region, frame_count: usize) -> Result<Vec<FrameTransform>> {
    let keys = &region.keyframes;
    if frame_count == 0 || keys.is_empty() {
        return Err(TtmError::invalid("trajectory needs at least one frame and one keyframe"));
    }
    if keys[0].frame != 0 || keys[keys.len() - 1].frame != frame_count - 1 {
        return Err(TtmError::invalid("keyframes must span frame 0 to frame_count - 1"));
    }
    if keys.windows(2).any(|w| w[1].frame <= w[0].frame) {
        return Err(TtmError::invalid("keyframe indices must be strictly increasing"));
    }
    let colors = region.appearance_override.as_deref();
    if colors.is_some_and(|c| c.len() != keys.len()) {
        return Err(TtmError::invalid("appearance_override needs one transform per keyframe"));
    }
    let pivot = region.pivot();

    let mut out = Vec::with_capacity(frame_count);
    let mut seg = 0;
    for f in 0..frame_count {
        while seg + 1 < keys.len() - 1 && keys[seg + 1].frame <= f {
            seg += 1;
        }
        let a = &keys[seg];
        let b = keys.get(seg + 1).unwrap_or(a);
        let (fa, fb) = (a.frame, b.frame.max(a.frame));
        let lerp = |va: f64, vb: f64| if fa == fb { va } else { interp(va, vb, fa, fb, f) };
        let color = colors.map(|c| {
            let (ca, cb) = (&c[seg], c.get(seg + 1).unwrap_or(&c[seg]));
            if f == fb {
                *cb
            } else if f == fa || fa == fb {
                *ca
            } else {
                ca.lerp(cb, (f - fa) as f32 / (fb - fa) as f32)
            }
        });
        out.push(FrameTransform {
            dx: lerp(a.dx, b.dx),
            dy: lerp(a.dy, b.dy),
            rotation: lerp(a.rotation, b.rotation),
            scale: lerp(a.log_scale, b.log_scale).exp(),
            pivot,
            color,
        });
    }
    Ok(out)
}
