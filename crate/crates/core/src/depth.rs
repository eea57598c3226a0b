//! Camera-motion references: back-project the source image through a depth
//! map, re-render it along a camera path with z-buffered point splats, and
//! turn the per-view coverage into a cleaned guidance mask.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtmError};
use crate::motion::{nn_inpaint, WarpedReference};
use crate::tensor::{Mask, MaskVideo, SourceImage, Video};

pub const OPEN_KERNEL: usize = 5;
pub const SCALE_SEARCH_RANGE: (f64, f64) = (0.01, 10.0);
pub const SCALE_SEARCH_ITERS: usize = 30;
pub const SCALE_BRACKET_POINTS: usize = 48;
pub const DEFAULT_MIN_SCALE: f64 = 0.3;
pub const LOW_COVERAGE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Sign conventions between the depth frame and the pose frame. `flip_z`
/// negates the optical axis, `flip_pitch` negates the vertical axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisConvention {
    #[serde(default)]
    pub flip_z: bool,
    #[serde(default)]
    pub flip_pitch: bool,
}

impl AxisConvention {
    fn signs(&self) -> [f64; 3] {
        [1.0, if self.flip_pitch { -1.0 } else { 1.0 }, if self.flip_z { -1.0 } else { 1.0 }]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub depth: Array2<f32>,
    pub intrinsics: Intrinsics,
    pub axis: AxisConvention,
}

impl DepthMap {
    pub fn new(depth: Array2<f32>, intrinsics: Intrinsics, axis: AxisConvention) -> Result<Self> {
        let (h, w) = depth.dim();
        let mut errs = Vec::new();
        if depth.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            errs.push("depths must be finite and positive".to_string());
        }
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        if !(fx > 0.0 && fy > 0.0) {
            errs.push("focal lengths must be positive".to_string());
        }
        if !(0.0..w as f64).contains(&cx) || !(0.0..h as f64).contains(&cy) {
            errs.push(format!("principal point ({cx}, {cy}) outside {w}x{h}"));
        }
        if errs.is_empty() {
            Ok(Self { depth, intrinsics, axis })
        } else {
            Err(TtmError::Validation(errs))
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.depth.dim()
    }
}

/// Camera-to-world pose; `translation` is the camera center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraPose {
    pub const IDENTITY: Self = Self {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn translation(t: [f64; 3]) -> Self {
        Self { translation: t, ..Self::IDENTITY }
    }

    /// From a row-major 4x4 homogeneous matrix.
    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(TtmError::invalid(format!("pose needs 16 values, got {}", m.len())));
        }
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            row.copy_from_slice(&m[r * 4..r * 4 + 3]);
        }
        Ok(Self { rotation, translation: [m[3], m[7], m[11]] })
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut m = [0.0; 16];
        for r in 0..3 {
            m[r * 4..r * 4 + 3].copy_from_slice(&self.rotation[r]);
            m[r * 4 + 3] = self.translation[r];
        }
        m[15] = 1.0;
        m
    }

    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    /// World point into this camera's frame, translation scaled by `scale`.
    fn to_camera(&self, p: [f64; 3], scale: f64) -> [f64; 3] {
        let d = [
            p[0] - scale * self.translation[0],
            p[1] - scale * self.translation[1],
            p[2] - scale * self.translation[2],
        ];
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraPath {
    pub poses: Vec<CameraPose>,
    pub scale: f64,
}

impl CameraPath {
    pub fn new(poses: Vec<CameraPose>, scale: f64) -> Result<Self> {
        let path = Self { poses, scale };
        path.validate()?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.poses.is_empty() {
            errs.push("camera path has no poses".to_string());
        } else if self.poses[0] != CameraPose::IDENTITY {
            errs.push("pose 0 must be the identity".to_string());
        }
        for (i, p) in self.poses.iter().enumerate() {
            if p.orthonormality_error() > 1e-6 {
                errs.push(format!("pose {i} rotation is not orthonormal"));
            }
            if p.rotation.iter().flatten().chain(p.translation.iter()).any(|v| !v.is_finite()) {
                errs.push(format!("pose {i} has non-finite values"));
            }
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            errs.push("scale must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TtmError::Validation(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f32; 3]>,
    /// Source pixel `(y, x)` of each point.
    pub pixels: Vec<(usize, usize)>,
    pub axis: AxisConvention,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Lifts every pixel to 3D with the pinhole model.
pub fn backproject(image: &SourceImage, depth: &DepthMap) -> Result<PointCloud> {
    let (h, w) = depth.dim();
    if (image.height(), image.width()) != (h, w) {
        return Err(TtmError::Shape(format!(
            "depth {h}x{w} vs image {}x{}",
            image.height(),
            image.width()
        )));
    }
    if depth.depth.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(TtmError::invalid("depths must be finite and positive"));
    }
    let Intrinsics { fx, fy, cx, cy } = depth.intrinsics;
    let s = depth.axis.signs();
    let px = image.pixels();
    let mut cloud = PointCloud {
        positions: Vec::with_capacity(h * w),
        colors: Vec::with_capacity(h * w),
        pixels: Vec::with_capacity(h * w),
        axis: depth.axis,
    };
    for ((v, u), &d) in depth.depth.indexed_iter() {
        let d = d as f64;
        cloud.positions.push([
            s[0] * (u as f64 - cx) * d / fx,
            s[1] * (v as f64 - cy) * d / fy,
            s[2] * d,
        ]);
        cloud.colors.push([px[[0, v, u]], px[[1, v, u]], px[[2, v, u]]]);
        cloud.pixels.push((v, u));
    }
    Ok(cloud)
}

/// Renders the cloud from `pose` into an `h x w` view. Each point lands on
/// its nearest pixel; the closest point wins, with ties going to the point
/// from the earlier source pixel so the result is order-independent.
pub fn splat_view(
    cloud: &PointCloud,
    pose: &CameraPose,
    scale: f64,
    intrinsics: &Intrinsics,
    size: (usize, usize),
) -> (Array3<f32>, Mask) {
    let (h, w) = size;
    let Intrinsics { fx, fy, cx, cy } = *intrinsics;
    let s = cloud.axis.signs();
    let mut zbuf: Vec<Option<(f64, (usize, usize), usize)>> = vec![None; h * w];
    for (k, &p) in cloud.positions.iter().enumerate() {
        let c = pose.to_camera(p, scale);
        let (x, y, z) = (s[0] * c[0], s[1] * c[1], s[2] * c[2]);
        if z <= 1e-9 {
            continue;
        }
        let u = (fx * x / z + cx).round();
        let v = (fy * y / z + cy).round();
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        let idx = v as usize * w + u as usize;
        let key = (z, cloud.pixels[k]);
        let better = match zbuf[idx] {
            None => true,
            Some((bz, bp, _)) => (key.0, key.1) < (bz, bp),
        };
        if better {
            zbuf[idx] = Some((z, cloud.pixels[k], k));
        }
    }
    let mut frame = Array3::<f32>::zeros((3, h, w));
    let mut valid = Mask::from_elem((h, w), false);
    for (idx, hit) in zbuf.iter().enumerate() {
        if let Some((_, _, k)) = hit {
            let (y, x) = (idx / w, idx % w);
            for c in 0..3 {
                frame[[c, y, x]] = cloud.colors[*k][c];
            }
            valid[[y, x]] = true;
        }
    }
    (frame, valid)
}

fn erode(mask: &Mask, k: usize) -> Mask {
    let (h, w) = mask.dim();
    let r = (k / 2) as isize;
    Mask::from_shape_fn((h, w), |(y, x)| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && !mask[[yy as usize, xx as usize]] {
                    return false;
                }
            }
        }
        true
    })
}

fn dilate(mask: &Mask, k: usize) -> Mask {
    let (h, w) = mask.dim();
    let r = (k / 2) as isize;
    Mask::from_shape_fn((h, w), |(y, x)| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && mask[[yy as usize, xx as usize]] {
                    return true;
                }
            }
        }
        false
    })
}

/// Morphological opening with a `kernel x kernel` square; pixels outside
/// the image are ignored.
pub fn morphological_open(mask: &Mask, kernel: usize) -> Mask {
    dilate(&erode(mask, kernel), kernel)
}

/// Guidance mask from a render's validity mask: opening with a 5x5 square.
pub fn clean_mask(valid: &Mask) -> Mask {
    morphological_open(valid, OPEN_KERNEL)
}

/// Renders every pose of the path at `scale`.
pub fn render_path(
    cloud: &PointCloud,
    path: &CameraPath,
    intrinsics: &Intrinsics,
    size: (usize, usize),
    scale: f64,
) -> Vec<(Array3<f32>, Mask)> {
    path.poses.iter().map(|p| splat_view(cloud, p, scale, intrinsics, size)).collect()
}

/// Mean over frames of the per-frame MSE on valid pixels. A frame with no
/// valid pixels makes the whole render unusable.
fn masked_mse(renders: &[(Array3<f32>, Mask)], reference: &Video) -> Option<f64> {
    let mut total = 0.0f64;
    for (f, (frame, valid)) in renders.iter().enumerate() {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for ((y, x), &ok) in valid.indexed_iter() {
            if ok {
                for c in 0..3 {
                    let d = frame[[c, y, x]] as f64 - reference[[f, c, y, x]] as f64;
                    sum += d * d;
                }
                n += 3;
            }
        }
        if n == 0 {
            return None;
        }
        total += sum / n as f64;
    }
    Some(total / renders.len().max(1) as f64)
}

/// Finds the translation scale whose renders best match `reference` in mean
/// squared error over valid pixels.
///
/// A log-spaced scan of [`SCALE_BRACKET_POINTS`] scales over `[0.01, 10]`
/// brackets the best scale between its grid neighbors; 30 rounds of interval
/// halving then refine inside the bracket, each probing two points around
/// the midpoint and keeping the side of the better one (the lower side on
/// ties). The best probe seen overall is returned, lower scale winning ties.
pub fn calibrate_scale(
    image: &SourceImage,
    depth: &DepthMap,
    path: &CameraPath,
    reference: &Video,
) -> Result<f64> {
    let (h, w) = depth.dim();
    if reference.dim() != (path.poses.len(), 3, h, w) {
        return Err(TtmError::Shape(format!(
            "reference {:?} vs {} poses of 3x{h}x{w}",
            reference.dim(),
            path.poses.len()
        )));
    }
    let cloud = backproject(image, depth)?;
    let objective = |s: f64| {
        masked_mse(&render_path(&cloud, path, &depth.intrinsics, (h, w), s), reference)
            .unwrap_or(f64::INFINITY)
    };
    let mut best = (f64::INFINITY, f64::INFINITY);
    let consider = |s: f64, v: f64, best: &mut (f64, f64)| {
        if v < best.0 || (v == best.0 && s < best.1) {
            *best = (v, s);
        }
    };
    let (lo0, hi0) = SCALE_SEARCH_RANGE;
    let n = SCALE_BRACKET_POINTS;
    let grid: Vec<f64> = (0..n)
        .map(|i| if i + 1 == n { hi0 } else { lo0 * (hi0 / lo0).powf(i as f64 / (n - 1) as f64) })
        .collect();
    let mut best_i = 0;
    for (i, &s) in grid.iter().enumerate() {
        let v = objective(s);
        let before = best;
        consider(s, v, &mut best);
        if best != before {
            best_i = i;
        }
    }
    let (mut lo, mut hi) = (grid[best_i.saturating_sub(1)], grid[(best_i + 1).min(n - 1)]);
    for _ in 0..SCALE_SEARCH_ITERS {
        let mid = 0.5 * (lo + hi);
        let delta = (hi - lo) / 8.0;
        let (a, b) = (mid - delta, mid + delta);
        let (va, vb) = (objective(a), objective(b));
        consider(a, va, &mut best);
        consider(b, vb, &mut best);
        if va <= vb {
            hi = b;
        } else {
            lo = a;
        }
    }
    if !best.0.is_finite() {
        return Err(TtmError::Degenerate("no valid pixels at any probed scale".into()));
    }
    Ok(best.1)
}

/// Dataset filter: keep sequences whose calibrated scale is at least
/// `min_scale`.
pub fn passes_scale_filter(scale: f64, min_scale: f64) -> bool {
    scale >= min_scale
}

/// Camera-motion warped reference: render each pose, fill uncovered pixels
/// by nearest-neighbor color, and use the opened coverage as the mask.
pub fn build_camera_reference(
    image: &SourceImage,
    depth: &DepthMap,
    path: &CameraPath,
) -> Result<WarpedReference> {
    path.validate()?;
    let (h, w) = depth.dim();
    let cloud = backproject(image, depth)?;
    let f_count = path.poses.len();
    let mut frames = Video::zeros((f_count, 3, h, w));
    let mut mask = MaskVideo::from_elem((f_count, h, w), false);
    let mut warnings = Vec::new();
    for (f, pose) in path.poses.iter().enumerate() {
        let (render, valid) = splat_view(&cloud, pose, path.scale, &depth.intrinsics, (h, w));
        let hole = valid.mapv(|v| !v);
        let filled = nn_inpaint(&render, &hole)?;
        frames.index_axis_mut(Axis(0), f).assign(&filled);
        mask.index_axis_mut(Axis(0), f).assign(&clean_mask(&valid));
        let coverage = valid.iter().filter(|v| **v).count() as f64 / (h * w) as f64;
        if f + 1 == f_count && coverage < LOW_COVERAGE {
            warnings.push(format!("final view covers only {:.1}% of pixels", coverage * 100.0));
        }
    }
    Ok(WarpedReference { frames, mask, warnings })
}

/// Reads a grayscale PFM ("Pf") depth map. PFM stores rows bottom-to-top.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(TtmError::invalid("truncated PFM header"));
        }
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    if header[0] != "Pf" {
        return Err(TtmError::invalid("only single-channel PFM (Pf) depth maps are supported"));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|_| TtmError::invalid("bad PFM header"));
    let (w, h, scale) = (parse(&header[1])? as usize, parse(&header[2])? as usize, parse(&header[3])?);
    let little = scale < 0.0;
    let mut buf = vec![0u8; w * h * 4];
    reader.read_exact(&mut buf)?;
    let mut out = Array2::<f32>::zeros((h, w));
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / w, i % w);
        out[[h - 1 - row, col]] = v;
    }
    Ok(out)
}

pub fn write_pfm(path: impl AsRef<Path>, depth: &Array2<f32>) -> Result<()> {
    let (h, w) = depth.dim();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "Pf\n{w} {h}\n-1.0\n")?;
    for row in (0..h).rev() {
        for col in 0..w {
            file.write_all(&depth[[row, col]].to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// JSON camera path: row-major 4x4 poses plus intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPathDocument {
    pub intrinsics: Intrinsics,
    pub poses: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub axis: AxisConvention,
}

fn one() -> f64 {
    1.0
}

impl CameraPathDocument {
    pub fn from_path(path: &CameraPath, intrinsics: Intrinsics, axis: AxisConvention) -> Self {
        Self {
            intrinsics,
            poses: path.poses.iter().map(|p| p.to_row_major().to_vec()).collect(),
            scale: path.scale,
            axis,
        }
    }

    pub fn to_path(&self) -> Result<CameraPath> {
        let poses = self.poses.iter().map(|m| CameraPose::from_row_major(m)).collect::<Result<_>>()?;
        CameraPath::new(poses, self.scale)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("camera paths always serialize")
    }
}
