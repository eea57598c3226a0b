//! Dense flow providers.

use std::collections::BTreeMap;

use ndarray::{s, Array2};

use crate::error::{Result, TtmError};
use crate::sprites::FlowVideo;
use crate::tensor::Video;

pub trait FlowProvider: Send + Sync {
    fn name(&self) -> &str;
    /// Forward flow `(F - 1, 2, H, W)` for a `(F, C, H, W)` video.
    fn flow(&self, video: &Video) -> Result<FlowVideo>;
}

/// Returns a fixed, precomputed flow; rejects videos of another shape.
pub struct GroundTruthFlow(pub FlowVideo);

impl FlowProvider for GroundTruthFlow {
    fn name(&self) -> &str {
        "ground_truth"
    }

    fn flow(&self, video: &Video) -> Result<FlowVideo> {
        let (f, _, h, w) = video.dim();
        if self.0.dim() != (f.saturating_sub(1), 2, h, w) {
            return Err(TtmError::Shape(format!("flow {:?} does not fit video {:?}", self.0.dim(), video.dim())));
        }
        Ok(self.0.clone())
    }
}

/// Exhaustive integer block matching: every pixel takes the displacement `d`
/// in `[-radius, radius]^2` minimizing the mean squared difference between
/// `patch x patch` neighborhoods (edge-clamped) plus `penalty * |d|^2`.
/// Ties go to the smaller displacement, then to row-major search order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockMatchingFlow {
    pub patch: usize,
    pub radius: usize,
    /// Cost per squared pixel of displacement. Keeps sensor-like noise in
    /// flat regions from reading as motion.
    pub penalty: f64,
}

impl Default for BlockMatchingFlow {
    fn default() -> Self {
        Self { patch: 5, radius: 3, penalty: DEFAULT_PENALTY }
    }
}

pub const DEFAULT_PENALTY: f64 = 2e-3;

fn clamp(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

/// Sum of `values` over a `k x k` window centered at every pixel, with the
/// window clamped at the image edges (replicated border).
fn box_sum_clamped(values: &Array2<f32>, k: usize) -> Array2<f64> {
    let (h, w) = values.dim();
    let r = (k / 2) as i64;
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            rows[[y, x]] = (-r..=r).map(|d| values[[y, clamp(x as i64 + d, w)]] as f64).sum();
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| (-r..=r).map(|d| rows[[clamp(y as i64 + d, h), x]]).sum())
}

impl FlowProvider for BlockMatchingFlow {
    fn name(&self) -> &str {
        "block_matching"
    }

    fn flow(&self, video: &Video) -> Result<FlowVideo> {
        if self.patch % 2 == 0 {
            return Err(TtmError::invalid("block matching patch size must be odd"));
        }
        let (frames, c, h, w) = video.dim();
        if frames < 2 {
            return Err(TtmError::Shape("flow needs at least two frames".into()));
        }
        let r = self.radius as i64;
        let mut order: Vec<(i64, i64)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
        order.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
        let mut flow = FlowVideo::zeros((frames - 1, 2, h, w));
        for f in 0..frames - 1 {
            let a = video.slice(s![f, .., .., ..]);
            let b = video.slice(s![f + 1, .., .., ..]);
            let mut best = Array2::from_elem((h, w), f64::INFINITY);
            let mut arg = Array2::from_elem((h, w), (0i64, 0i64));
            for &(dx, dy) in &order {
                let diff = Array2::from_shape_fn((h, w), |(y, x)| {
                    let (ty, tx) = (clamp(y as i64 + dy, h), clamp(x as i64 + dx, w));
                    (0..c).map(|ch| (a[[ch, y, x]] - b[[ch, ty, tx]]).powi(2)).sum::<f32>()
                });
                let norm = (self.patch * self.patch * c) as f64;
                let bias = self.penalty * (dx * dx + dy * dy) as f64;
                let cost = box_sum_clamped(&diff, self.patch).mapv(|v| v / norm + bias);
                ndarray::Zip::from(&mut best).and(&mut arg).and(&cost).for_each(|bst, ar, &cst| {
                    if cst < *bst - 1e-9 {
                        *bst = cst;
                        *ar = (dx, dy);
                    }
                });
            }
            for ((y, x), &(dx, dy)) in arg.indexed_iter() {
                flow[[f, 0, y, x]] = dx as f32;
                flow[[f, 1, y, x]] = dy as f32;
            }
        }
        Ok(flow)
    }
}

pub type FlowFactory = fn() -> Box<dyn FlowProvider>;

/// Flow providers by name.
pub struct FlowRegistry {
    entries: BTreeMap<String, FlowFactory>,
}

impl Default for FlowRegistry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register("block_matching", || Box::new(BlockMatchingFlow::default()));
        r.register("block_matching_raw", || Box::new(BlockMatchingFlow { penalty: 0.0, ..Default::default() }));
        r.register("block_matching_wide", || Box::new(BlockMatchingFlow { patch: 7, radius: 6, ..Default::default() }));
        r
    }
}

impl FlowRegistry {
    pub fn register(&mut self, name: &str, factory: FlowFactory) {
        self.entries.insert(name.to_string(), factory);
    }

    pub fn get(&self, name: &str) -> Result<Box<dyn FlowProvider>> {
        self.entries
            .get(name)
            .map(|f| f())
            .ok_or_else(|| TtmError::invalid(format!("unknown flow provider {name:?}; known: {:?}", self.names())))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}
