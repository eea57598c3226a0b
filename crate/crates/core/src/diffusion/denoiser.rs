use std::sync::atomic::{AtomicUsize, Ordering};

use super::{NoiseSchedule, VideoState};
use crate::error::{Result, TtmError};
use crate::tensor::{SourceImage, Video};

/// Anything that predicts the noise in a state: analytic oracles, the toy
/// network, or an adapter around a real backbone.
///
/// Implementations must be deterministic in their inputs and safe to call
/// concurrently.
pub trait Denoiser: Send + Sync {
    /// Epsilon prediction with the same shape as `state.values`.
    fn predict(&self, state: &VideoState, condition: &SourceImage, text: Option<&str>) -> Result<Video>;

    /// The schedule the model was built for; samplers step on this schedule.
    fn schedule(&self) -> &NoiseSchedule;

    /// Stable identifier of the weights/parameters, for run manifests.
    fn fingerprint(&self) -> String;

    /// Range of valid clean data. When set, samplers clamp each step's
    /// implied `x_0` estimate to it.
    fn data_range(&self) -> Option<(f32, f32)> {
        None
    }
}

/// Exact epsilon posterior when every element of `x_0` is i.i.d.
/// `N(mean, variance)`:
/// `E[eps | x_t] = sqrt(1-ab) * (x_t - sqrt(ab) * mean) / (ab * variance + 1 - ab)`.
#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    pub mean: f64,
    pub variance: f64,
    schedule: NoiseSchedule,
}

impl GaussianDenoiser {
    pub fn new(mean: f64, variance: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite() && mean.is_finite()) {
            return Err(TtmError::invalid("gaussian denoiser needs finite mean and variance >= 0"));
        }
        Ok(Self { mean, variance, schedule })
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict(&self, state: &VideoState, _condition: &SourceImage, _text: Option<&str>) -> Result<Video> {
        let t = state.t;
        if t == 0 || t > self.schedule.steps {
            return Err(TtmError::invalid(format!("gaussian denoiser needs 1 <= t <= T, got {t}")));
        }
        let ab = self.schedule.alpha_bar(t);
        let gain = (1.0 - ab).sqrt() / (ab * self.variance + 1.0 - ab);
        let shift = ab.sqrt() * self.mean;
        Ok(state.values.mapv(|x| (gain * (x as f64 - shift)) as f32))
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn fingerprint(&self) -> String {
        crate::tensor::hash_bytes(
            format!("gaussian:{:e}:{:e}:{}", self.mean, self.variance, self.schedule.content_hash()).as_bytes(),
        )
    }
}

/// Wraps a denoiser and counts `predict` calls.
pub struct CountingDenoiser<'a> {
    inner: &'a dyn Denoiser,
    calls: AtomicUsize,
}

impl<'a> CountingDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Denoiser for CountingDenoiser<'_> {
    fn predict(&self, state: &VideoState, condition: &SourceImage, text: Option<&str>) -> Result<Video> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(state, condition, text)
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn data_range(&self) -> Option<(f32, f32)> {
        self.inner.data_range()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn cond() -> SourceImage {
        SourceImage::new(Array3::zeros((3, 8, 8))).unwrap()
    }

    #[test]
    fn point_mass_limit() {
        let s = NoiseSchedule::default();
        let d = GaussianDenoiser::new(0.3, 0.0, s.clone()).unwrap();
        let x = Video::from_elem((1, 3, 2, 2), 0.9);
        let out = d.predict(&VideoState::new(x, 10), &cond(), None).unwrap();
        let ab = s.alpha_bar(10);
        let want = (0.9f32 as f64 - ab.sqrt() * 0.3) / (1.0 - ab).sqrt();
        assert!(out.iter().all(|v| (*v as f64 - want).abs() < 1e-6));
    }

    #[test]
    fn scaled_mean_predicts_zero() {
        let s = NoiseSchedule::default();
        let d = GaussianDenoiser::new(0.0, 0.5, s).unwrap();
        let out = d.predict(&VideoState::new(Video::zeros((1, 3, 2, 2)), 25), &cond(), None).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }
}
