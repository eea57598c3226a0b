use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{features, ConvNet, Scalar, ToyModel};
use crate::diffusion::{forward_noise_with, standard_normal_like, NoiseSchedule};
use crate::error::{Result, TtmError};
use crate::tensor::Video;

/// Indexed clean clips `(F, 3, H, W)`; frame 0 is the condition image.
pub trait TrainingData: Sync {
    fn len(&self) -> usize;
    fn clip(&self, index: usize) -> &Video;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingData for Vec<Video> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn clip(&self, index: usize) -> &Video {
        &self[index]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Square spatial crop side; `None` trains on whole frames.
    pub crop: Option<usize>,
    /// Reuse the step-0 batch (same clips, crops, steps and noise) forever.
    #[serde(default)]
    pub fixed_batch: bool,
    /// Crop windows drawn per sample; the one with the most change from
    /// frame 0 is kept.
    #[serde(default = "one")]
    pub crop_candidates: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, steps: 3000, batch_size: 4, lr: 3e-3, warmup: 100, crop: Some(32), fixed_batch: false, crop_candidates: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub steps_done: usize,
    pub losses: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step as i32);
        let c2 = 1.0 - B2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = B1 * self.m[i] as f64 + (1.0 - B1) * g;
            let v = B2 * self.v[i] as f64 + (1.0 - B2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            params[i] -= (lr * (m / c1) / ((v / c2).sqrt() + EPS)) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f32>,
    pub steps_done: usize,
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x0: Video,
    pub cond: Array3<f32>,
    pub t: usize,
    pub eps: Video,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Sum of absolute differences from frame 0 inside a square window.
fn temporal_change(clip: &Video, y0: usize, x0: usize, side: usize) -> f32 {
    let first = clip.slice(s![0, .., y0..y0 + side, x0..x0 + side]);
    clip.outer_iter()
        .skip(1)
        .map(|frame| {
            let win = frame.slice(s![.., y0..y0 + side, x0..x0 + side]);
            ndarray::Zip::from(&win).and(&first).fold(0.0f32, |acc, a, b| acc + (a - b).abs())
        })
        .sum()
}

/// The batch for `step` depends only on `(seed, step)`, so training resumes
/// exactly where it stopped.
pub fn make_batch(data: &dyn TrainingData, cfg: &TrainConfig, step: usize, schedule: &NoiseSchedule) -> Vec<TrainSample> {
    let mut rng = step_rng(cfg.seed, if cfg.fixed_batch { 0 } else { step });
    (0..cfg.batch_size)
        .map(|_| {
            let clip = data.clip(rng.random_range(0..data.len()));
            let (_, _, h, w) = clip.dim();
            let (y0, x0, ch, cw) = match cfg.crop {
                Some(c) if c < h && c < w => {
                    let mut best = (f32::NEG_INFINITY, 0, 0);
                    for _ in 0..cfg.crop_candidates.max(1) {
                        let (y, x) = (rng.random_range(0..=h - c), rng.random_range(0..=w - c));
                        let score = temporal_change(clip, y, x, c);
                        if score > best.0 {
                            best = (score, y, x);
                        }
                    }
                    (best.1, best.2, c, c)
                }
                _ => (0, 0, h, w),
            };
            let x = clip.slice(s![.., .., y0..y0 + ch, x0..x0 + cw]).to_owned();
            let cond = x.index_axis(Axis(0), 0).to_owned();
            let t = rng.random_range(1..=schedule.steps);
            let eps = standard_normal_like(x.dim(), &mut rng);
            TrainSample { x0: x, cond, t, eps }
        })
        .collect()
}

/// Mean squared epsilon error over the batch and its parameter gradient.
pub fn loss_and_grad<S: Scalar>(net: &ConvNet<S>, schedule: &NoiseSchedule, batch: &[TrainSample]) -> (f64, Vec<S>) {
    let mut grads = vec![S::zero(); net.param_count()];
    let total: usize = batch.iter().map(|b| b.x0.len()).sum();
    let scale = S::from(2.0 / total as f64).unwrap();
    let mut loss = 0.0f64;
    for sample in batch {
        let xt = forward_noise_with(&sample.x0, sample.t, schedule, &sample.eps);
        let (feats, implied, grid) = features::<S>(&xt, sample.t, sample.cond.view(), schedule);
        let (out, trace) = net.forward_traced(&feats, grid);
        let (frames, height, width) = (grid.frames, grid.height, grid.width);
        let mut g = vec![S::zero(); out.len()];
        for f in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    let base = ((f * height + y) * width + x) * 3;
                    for c in 0..3 {
                        let pred = out[base + c] + implied[base + c];
                        let diff = pred - S::from(sample.eps[[f, c, y, x]]).unwrap();
                        loss += diff.to_f64().unwrap().powi(2);
                        g[base + c] = diff * scale;
                    }
                }
            }
        }
        net.backward(&trace, g, grid, &mut grads);
    }
    (loss / total as f64, grads)
}

fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps.saturating_sub(cfg.warmup)).max(1) as f64;
    let u = ((step - cfg.warmup) as f64 / span).min(1.0);
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * u).cos()))
}

/// Trains `model` in place up to `cfg.steps` total steps, resuming from the
/// model's recorded progress when it was trained with the same config.
pub fn train(
    model: &mut ToyModel,
    data: &dyn TrainingData,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f32),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(TtmError::invalid("training data is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(TtmError::invalid("batch_size must be positive"));
    }
    let n = model.net.param_count();
    let mut state = match model.train_state.take() {
        Some(s) if s.config == *cfg && model.optimizer.is_some() => s,
        _ => {
            model.optimizer = None;
            TrainState { config: cfg.clone(), steps_done: 0, losses: Vec::new() }
        }
    };
    let mut opt = model.optimizer.take().unwrap_or_else(|| AdamState::new(n));
    let result = (|| {
        for step in state.steps_done..cfg.steps {
            let batch = make_batch(data, cfg, step, &model.schedule);
            let (loss, grads) = loss_and_grad(&model.net, &model.schedule, &batch);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TtmError::Diverged { step, detail: format!("loss = {loss}") });
            }
            opt.update(&mut model.net.params, &grads, learning_rate(cfg, step));
            state.losses.push(loss as f32);
            state.steps_done = step + 1;
            on_step(step, loss as f32);
        }
        Ok(())
    })();
    let report = TrainReport { losses: state.losses.clone(), steps_done: state.steps_done };
    model.train_state = Some(state);
    model.optimizer = Some(opt);
    result.map(|_| report)
}
