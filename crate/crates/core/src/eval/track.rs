//! Desk-scale point tracking: a color-centroid object tracker and a
//! template-matching background grid.

use ndarray::{s, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtmError};
use crate::tensor::{mask_centroid, Mask, Video};

pub type Point = (f64, f64);

/// Object track `o_t` (None where the object was lost) and background grid
/// tracks `grid[t][j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub object: Vec<Option<Point>>,
    pub grid: Vec<Vec<Point>>,
}

impl TrackResult {
    pub fn frames(&self) -> usize {
        self.object.len()
    }

    pub fn lost_frames(&self) -> usize {
        self.object.iter().filter(|p| p.is_none()).count()
    }

    pub fn loss_ratio(&self) -> f64 {
        self.lost_frames() as f64 / self.frames().max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.object.first().is_none_or(|p| p.is_none()) {
            return Err(TtmError::invalid("object track must start at the query point"));
        }
        if !self.grid.is_empty() && self.grid.len() != self.object.len() {
            return Err(TtmError::Shape("grid and object tracks differ in length".into()));
        }
        let finite = |p: &Point| p.0.is_finite() && p.1.is_finite();
        if !self.object.iter().flatten().all(finite) || !self.grid.iter().flatten().all(finite) {
            return Err(TtmError::invalid("track positions must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Maximum RGB Euclidean distance to the object's mean color.
    pub color_threshold: f32,
    pub grid_size: usize,
    pub patch: usize,
    pub search_radius: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { color_threshold: 0.3, grid_size: 16, patch: 9, search_radius: 6 }
    }
}

/// Centers of a uniform `n x n` grid of cells, `(x, y)`.
pub fn grid_points(height: usize, width: usize, n: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let y = ((i as f64 + 0.5) * height as f64 / n as f64).floor();
            let x = ((j as f64 + 0.5) * width as f64 / n as f64).floor();
            pts.push((x, y));
        }
    }
    pts
}

fn patch_ssd(a: ArrayView3<'_, f32>, ap: (i64, i64), b: ArrayView3<'_, f32>, bp: (i64, i64), r: i64) -> f64 {
    let (c, h, w) = a.dim();
    let at = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut sum = 0.0f64;
    for dy in -r..=r {
        for dx in -r..=r {
            for ch in 0..c {
                let va = a[[ch, at(ap.1 + dy, h), at(ap.0 + dx, w)]];
                let vb = b[[ch, at(bp.1 + dy, h), at(bp.0 + dx, w)]];
                sum += ((va - vb) as f64).powi(2);
            }
        }
    }
    sum
}

/// Tracks the object as the centroid of pixels whose color lies within the
/// threshold of the first-frame masked region's mean color, and the
/// background grid by frame-to-frame template matching. Frame 0 positions
/// are the query points (the mask centroid and the grid).
pub fn centroid_tracker(video: &Video, initial_mask: &Mask, cfg: &TrackerConfig) -> Result<TrackResult> {
    let (frames, c, h, w) = video.dim();
    if initial_mask.dim() != (h, w) {
        return Err(TtmError::Shape(format!("mask {:?} does not match frames {h}x{w}", initial_mask.dim())));
    }
    if cfg.patch % 2 == 0 {
        return Err(TtmError::invalid("template patch must be odd"));
    }
    let query = mask_centroid(initial_mask).ok_or_else(|| TtmError::invalid("initial mask is empty"))?;
    let first = video.slice(s![0, .., .., ..]);
    let mut mean = vec![0.0f32; c];
    let mut n = 0usize;
    for ((y, x), m) in initial_mask.indexed_iter() {
        if *m {
            n += 1;
            for ch in 0..c {
                mean[ch] += first[[ch, y, x]];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f32);
    let thr2 = cfg.color_threshold * cfg.color_threshold;

    let mut object = vec![Some(query)];
    for f in 1..frames {
        let frame = video.slice(s![f, .., .., ..]);
        let (mut sx, mut sy, mut k) = (0.0f64, 0.0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                let d2: f32 = (0..c).map(|ch| (frame[[ch, y, x]] - mean[ch]).powi(2)).sum();
                if d2 <= thr2 {
                    sx += x as f64;
                    sy += y as f64;
                    k += 1;
                }
            }
        }
        object.push((k > 0).then(|| (sx / k as f64, sy / k as f64)));
    }

    let r = cfg.search_radius as i64;
    let half = (cfg.patch / 2) as i64;
    let mut offsets: Vec<(i64, i64)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
    offsets.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    let starts = grid_points(h, w, cfg.grid_size);
    let mut current: Vec<(i64, i64)> = starts.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
    let mut grid = vec![starts];
    for f in 1..frames {
        let prev = video.slice(s![f - 1, .., .., ..]);
        let next = video.slice(s![f, .., .., ..]);
        for p in current.iter_mut() {
            let mut best = (f64::INFINITY, *p);
            for &(dx, dy) in &offsets {
                let q = (p.0 + dx, p.1 + dy);
                if q.0 < 0 || q.1 < 0 || q.0 >= w as i64 || q.1 >= h as i64 {
                    continue;
                }
                let cost = patch_ssd(prev, *p, next, q, half);
                if cost < best.0 - 1e-12 {
                    best = (cost, q);
                }
            }
            *p = best.1;
        }
        grid.push(current.iter().map(|&(x, y)| (x as f64, y as f64)).collect());
    }
    Ok(TrackResult { object, grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn scene(shift: i64) -> (Video, Mask) {
        let bg = |x: i64, y: i64| 0.3 + 0.2 * ((x * 3 + y * 5) % 7) as f32 / 7.0;
        let v = Array4::from_shape_fn((2, 3, 32, 32), |(f, c, y, x)| {
            let ox = x as i64 - shift * f as i64;
            if (10..15).contains(&ox) && (12..16).contains(&y) {
                [0.9, 0.1, 0.1][c]
            } else {
                bg(x as i64, y as i64) * [0.5, 0.6, 1.0][c]
            }
        });
        let m = Mask::from_shape_fn((32, 32), |(y, x)| (10..15).contains(&x) && (12..16).contains(&y));
        (v, m)
    }

    #[test]
    fn rigid_shift_moves_centroid_exactly() {
        let (v, m) = scene(2);
        let tr = centroid_tracker(&v, &m, &TrackerConfig::default()).unwrap();
        let (a, b) = (tr.object[0].unwrap(), tr.object[1].unwrap());
        assert_eq!((b.0 - a.0, b.1 - a.1), (2.0, 0.0));
        assert!(tr.grid[1].iter().zip(&tr.grid[0]).all(|(p, q)| p == q || (p.1 - 14.0).abs() < 8.0));
    }

    #[test]
    fn static_video_has_no_displacement() {
        let (v, m) = scene(0);
        let tr = centroid_tracker(&v, &m, &TrackerConfig::default()).unwrap();
        assert_eq!(tr.object[0], tr.object[1]);
        assert_eq!(tr.grid[0], tr.grid[1]);
        tr.validate().unwrap();
    }

    #[test]
    fn lost_object_is_marked() {
        let (mut v, m) = scene(0);
        v.slice_mut(s![1, 0, .., ..]).fill(0.0);
        let tr = centroid_tracker(&v, &m, &TrackerConfig::default()).unwrap();
        assert_eq!(tr.object[1], None);
        assert_eq!(tr.lost_frames(), 1);
    }
}
