//! Forward noising `q(x_t | x_0)` and the ancestral reverse step for an
//! epsilon-predicting model.

use ndarray::Zip;
use rand::Rng;
use rand_distr::StandardNormal;

use super::NoiseSchedule;
use crate::error::{Result, TtmError};
use crate::tensor::Video;

/// A video tensor tagged with the single diffusion step it sits at.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoState {
    pub values: Video,
    pub t: usize,
}

impl VideoState {
    pub fn new(values: Video, t: usize) -> Self {
        Self { values, t }
    }
}

pub fn standard_normal_like<R: Rng + ?Sized>(shape: (usize, usize, usize, usize), rng: &mut R) -> Video {
    Video::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal))
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` with the given noise.
pub fn forward_noise_with(x0: &Video, t: usize, schedule: &NoiseSchedule, eps: &Video) -> Video {
    if t == 0 {
        return x0.clone();
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let mut out = x0.clone();
    Zip::from(&mut out).and(eps).for_each(|o, &e| *o = a * *o + b * e);
    out
}

/// Samples `x_t ~ q(x_t | x_0)`. At `t == 0` returns `x0` unchanged and
/// draws nothing from `rng`.
pub fn forward_noise<R: Rng + ?Sized>(x0: &Video, t: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<Video> {
    if t > schedule.steps {
        return Err(TtmError::invalid(format!("t = {t} exceeds T = {}", schedule.steps)));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let eps = standard_normal_like(x0.dim(), rng);
    Ok(forward_noise_with(x0, t, schedule, &eps))
}

/// One ancestral step `x_t -> x_{t-1}`: posterior mean from the noise
/// prediction plus `beta_tilde` variance noise. The step to 0 is
/// deterministic and consumes no randomness.
pub fn ddpm_step<R: Rng + ?Sized>(
    x_t: &Video,
    t: usize,
    noise_pred: &Video,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Video> {
    ddpm_step_clipped(x_t, t, noise_pred, schedule, None, rng)
}

/// [`ddpm_step`] with the implied `x_0` estimate clamped to `range` before
/// forming the posterior mean. With `None` this is exactly [`ddpm_step`].
pub fn ddpm_step_clipped<R: Rng + ?Sized>(
    x_t: &Video,
    t: usize,
    noise_pred: &Video,
    schedule: &NoiseSchedule,
    range: Option<(f32, f32)>,
    rng: &mut R,
) -> Result<Video> {
    if t == 0 || t > schedule.steps {
        return Err(TtmError::invalid(format!("ddpm_step needs 1 <= t <= T, got {t}")));
    }
    if x_t.dim() != noise_pred.dim() {
        return Err(TtmError::Shape(format!("state {:?} vs prediction {:?}", x_t.dim(), noise_pred.dim())));
    }
    let beta = schedule.beta(t);
    let mut out = x_t.clone();
    match range {
        None => {
            let inv_sqrt_alpha = (1.0 / schedule.alpha(t).sqrt()) as f32;
            let eps_coef = (beta / (1.0 - schedule.alpha_bar(t)).sqrt()) as f32;
            Zip::from(&mut out)
                .and(noise_pred)
                .for_each(|x, &e| *x = inv_sqrt_alpha * (*x - eps_coef * e));
        }
        Some((lo, hi)) => {
            let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
            let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let c0 = (ab_prev.sqrt() * beta / (1.0 - ab)) as f32;
            let ct = (schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab)) as f32;
            Zip::from(&mut out).and(noise_pred).for_each(|x, &e| {
                let x0 = ((*x - sn * e) / sa).clamp(lo, hi);
                *x = c0 * x0 + ct * *x;
            });
        }
    }
    if t > 1 {
        let sigma = schedule.beta_tilde(t).sqrt() as f32;
        out.mapv_inplace(|v| v + sigma * rng.sample::<f32, _>(StandardNormal));
    }
    Ok(out)
}
