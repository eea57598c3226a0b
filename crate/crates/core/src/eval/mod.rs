//! Motion-control metrics: trajectory adherence (CTD), background/object
//! co-motion, dynamic degree and frame-level camera metrics.

mod flow;
mod report;
mod track;

pub use flow::{BlockMatchingFlow, FlowFactory, FlowProvider, FlowRegistry, GroundTruthFlow};
pub use report::{evaluate_clip, AblationRow, AblationTable, ClipMetrics, EvalConfig};
pub use track::{centroid_tracker, grid_points, Point, TrackResult, TrackerConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtmError};
use crate::sprites::FlowVideo;
use crate::tensor::Video;

pub const DEFAULT_ALPHA: f64 = 3.5;
/// Largest tolerated fraction of lost object frames.
pub const MAX_LOSS_RATIO: f64 = 0.2;

fn dist(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Mean Euclidean distance between corresponding points.
pub fn ctd_points(track: &[Point], target: &[Point]) -> Result<f64> {
    if track.len() != target.len() || track.is_empty() {
        return Err(TtmError::Shape(format!("track has {} points, target {}", track.len(), target.len())));
    }
    Ok(track.iter().zip(target).map(|(a, b)| dist(*a, *b)).sum::<f64>() / track.len() as f64)
}

/// CTD of the object track against `target`, excluding lost frames. Fails
/// with [`TtmError::TrackLost`] when more than [`MAX_LOSS_RATIO`] of the
/// frames were lost.
pub fn ctd(track: &TrackResult, target: &[Point]) -> Result<f64> {
    if track.object.len() != target.len() {
        return Err(TtmError::Shape(format!("track has {} frames, target {}", track.object.len(), target.len())));
    }
    if track.loss_ratio() > MAX_LOSS_RATIO {
        return Err(TtmError::TrackLost { lost: track.lost_frames(), total: track.frames() });
    }
    let (a, b): (Vec<Point>, Vec<Point>) =
        track.object.iter().zip(target).filter_map(|(o, t)| o.map(|o| (o, *t))).unzip();
    ctd_points(&a, &b)
}

/// Average over frames `t >= 1` and grid points `j` of
/// `|(p_jt - p_j0) - (o_t - o_0)|`; frames with a lost object are skipped.
pub fn bg_obj_ctd(track: &TrackResult) -> Result<f64> {
    let frames = track.frames();
    if frames < 2 || track.grid.len() != frames {
        return Err(TtmError::Shape(format!("need >= 2 frames of object and grid tracks, got {frames}")));
    }
    let o0 = track.object[0].ok_or_else(|| TtmError::invalid("object track has no query point"))?;
    let j = track.grid[0].len();
    if j == 0 || track.grid.iter().any(|g| g.len() != j) {
        return Err(TtmError::Shape("grid tracks must be nonempty and equally sized".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for t in 1..frames {
        let Some(ot) = track.object[t] else { continue };
        let dobj = (ot.0 - o0.0, ot.1 - o0.1);
        for (p, p0) in track.grid[t].iter().zip(&track.grid[0]) {
            sum += dist((p.0 - p0.0, p.1 - p0.1), dobj);
        }
        used += 1;
    }
    if used == 0 {
        return Err(TtmError::TrackLost { lost: frames - 1, total: frames });
    }
    Ok(sum / (used * j) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicDegree {
    pub dynamic: bool,
    /// Fraction of frames classified dynamic.
    pub score: f64,
    pub threshold: f64,
    /// Mean of the top 5% flow magnitudes per frame.
    pub frame_values: Vec<f64>,
}

/// Mean of the largest `max(1, floor(0.05 n))` values.
pub fn top_fraction_mean(mut values: Vec<f64>, fraction: f64) -> f64 {
    let k = ((values.len() as f64 * fraction).floor() as usize).max(1).min(values.len());
    values.sort_by(|a, b| b.total_cmp(a));
    values[..k].iter().sum::<f64>() / k as f64
}

/// Classifies precomputed flow: a frame is dynamic when its top-5% mean
/// magnitude exceeds `alpha * min(H, W) / 256`; the clip is dynamic when at
/// least a quarter of its frames are.
pub fn dynamic_degree_from_flow(flow: &FlowVideo, alpha: f64) -> Result<DynamicDegree> {
    let (n, two, h, w) = flow.dim();
    if two != 2 || n == 0 {
        return Err(TtmError::Shape(format!("flow must be (F-1, 2, H, W) with F >= 2, got {:?}", flow.dim())));
    }
    let threshold = alpha * h.min(w) as f64 / 256.0;
    let frame_values: Vec<f64> = (0..n)
        .map(|f| {
            let mags = (0..h * w)
                .map(|i| (flow[[f, 0, i / w, i % w]] as f64).hypot(flow[[f, 1, i / w, i % w]] as f64))
                .collect();
            top_fraction_mean(mags, 0.05)
        })
        .collect();
    let count = frame_values.iter().filter(|v| **v > threshold).count();
    Ok(DynamicDegree { dynamic: 4 * count >= n, score: count as f64 / n as f64, threshold, frame_values })
}

pub fn dynamic_degree(video: &Video, provider: &dyn FlowProvider, alpha: f64) -> Result<DynamicDegree> {
    let flow = provider.flow(video)?;
    let (f, _, h, w) = video.dim();
    if flow.dim() != (f.saturating_sub(1), 2, h, w) {
        return Err(TtmError::Shape(format!("provider returned flow {:?} for video {:?}", flow.dim(), video.dim())));
    }
    dynamic_degree_from_flow(&flow, alpha)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of two single-channel images on `[0, 1]` over all fully
/// contained 11x11 Gaussian windows.
pub fn ssim_plane(a: ndarray::ArrayView2<'_, f32>, b: ndarray::ArrayView2<'_, f32>) -> Result<f64> {
    let (h, w) = a.dim();
    if b.dim() != (h, w) {
        return Err(TtmError::Shape("ssim planes differ in shape".into()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(TtmError::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // Separable filtering of a, b, a^2, b^2, ab: horizontal then vertical.
    let chans = |y: usize, x: usize| {
        let (p, q) = (a[[y, x]] as f64, b[[y, x]] as f64);
        [p, q, p * p, q * q, p * q]
    };
    let mut horiz = vec![[0.0f64; 5]; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = [0.0; 5];
            for (k, gk) in g.iter().enumerate() {
                let v = chans(y, x + k);
                for i in 0..5 {
                    acc[i] += gk * v[i];
                }
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let mut m = [0.0; 5];
            for (k, gk) in g.iter().enumerate() {
                let v = horiz[(y + k) * ow + x];
                for i in 0..5 {
                    m[i] += gk * v[i];
                }
            }
            let (mu_a, mu_b) = (m[0], m[1]);
            let va = m[2] - mu_a * mu_a;
            let vb = m[3] - mu_b * mu_b;
            let cov = m[4] - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraMetrics {
    pub mse: f64,
    pub ssim: f64,
    pub flow_mse: f64,
}

/// Pixel MSE, mean SSIM over frames and channels, and MSE between the
/// provider's flows of both videos.
pub fn camera_metrics(generated: &Video, reference: &Video, provider: &dyn FlowProvider) -> Result<CameraMetrics> {
    if generated.dim() != reference.dim() {
        return Err(TtmError::Shape(format!("{:?} vs {:?}", generated.dim(), reference.dim())));
    }
    let n = generated.len() as f64;
    let mse = generated.iter().zip(reference).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n;
    let (f, c, _, _) = generated.dim();
    let mut ssim = 0.0;
    for fi in 0..f {
        for ci in 0..c {
            ssim += ssim_plane(
                generated.slice(ndarray::s![fi, ci, .., ..]),
                reference.slice(ndarray::s![fi, ci, .., ..]),
            )?;
        }
    }
    ssim /= (f * c) as f64;
    let (fa, fb) = (provider.flow(generated)?, provider.flow(reference)?);
    let flow_mse = if fa.is_empty() {
        0.0
    } else {
        fa.iter().zip(&fb).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / fa.len() as f64
    };
    Ok(CameraMetrics { mse, ssim, flow_mse })
}

/// Resize-and-pad mapping `p' = scale * p + offset`, applied to frames and
/// therefore to trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizePad {
    pub scale: (f64, f64),
    pub offset: (f64, f64),
}

impl ResizePad {
    pub const IDENTITY: Self = Self { scale: (1.0, 1.0), offset: (0.0, 0.0) };

    pub fn uniform(scale: f64, offset: (f64, f64)) -> Self {
        Self { scale: (scale, scale), offset }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s.is_finite() && s != 0.0;
        if !ok(self.scale.0) || !ok(self.scale.1) || !self.offset.0.is_finite() || !self.offset.1.is_finite() {
            return Err(TtmError::invalid("resize-and-pad needs finite, non-zero scales"));
        }
        Ok(())
    }

    pub fn apply(&self, p: Point) -> Point {
        (self.scale.0 * p.0 + self.offset.0, self.scale.1 * p.1 + self.offset.1)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.validate()?;
        Ok(Self {
            scale: (1.0 / self.scale.0, 1.0 / self.scale.1),
            offset: (-self.offset.0 / self.scale.0, -self.offset.1 / self.scale.1),
        })
    }

    /// Exact inverse of [`ResizePad::apply`] (no reciprocal rounding).
    pub fn unapply(&self, p: Point) -> Point {
        ((p.0 - self.offset.0) / self.scale.0, (p.1 - self.offset.1) / self.scale.1)
    }
}

pub fn trajectory_rescale(trajectory: &[Point], params: &ResizePad) -> Result<Vec<Point>> {
    params.validate()?;
    Ok(trajectory.iter().map(|p| params.apply(*p)).collect())
}

pub fn trajectory_unscale(trajectory: &[Point], params: &ResizePad) -> Result<Vec<Point>> {
    params.validate()?;
    Ok(trajectory.iter().map(|p| params.unapply(*p)).collect())
}
