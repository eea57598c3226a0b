use serde::{Deserialize, Serialize};

use crate::error::{Result, TtmError};

pub const DEFAULT_STEPS: usize = 50;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

/// Discrete schedule over step indices `0..=T`; `alpha_bar[0] == 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
}

/// Unnormalized cosine signal level at step `t` of `steps`.
pub fn cosine_level(t: usize, steps: usize) -> f64 {
    let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(TtmError::invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        match kind {
            ScheduleKind::Linear => {
                // DDPM's 1e-4..0.02 range, rescaled from 1000 steps to `steps`.
                let k = 1000.0 / steps as f64;
                let (b0, b1) = (1e-4 * k, (0.02 * k).min(MAX_BETA));
                let mut acc = 1.0;
                for t in 1..=steps {
                    let beta = b0 + (b1 - b0) * (t - 1) as f64 / (steps - 1) as f64;
                    acc *= 1.0 - beta;
                    alpha_bar.push(acc);
                }
            }
            ScheduleKind::Cosine => {
                let f0 = cosine_level(0, steps);
                for t in 1..=steps {
                    let prev = alpha_bar[t - 1];
                    alpha_bar.push((cosine_level(t, steps) / f0).max(prev * (1.0 - MAX_BETA)));
                }
            }
        }
        Ok(Self { kind, steps, alpha_bar })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Per-step `beta_t = 1 - alpha_bar[t] / alpha_bar[t-1]`, `t >= 1`.
    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Posterior variance of `x_{t-1}` given `x_t` and `x_0`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta(t)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let ab = &self.alpha_bar;
        let mut errs = Vec::new();
        if ab.len() != self.steps + 1 || ab[0] != 1.0 {
            errs.push("alpha_bar must have T+1 entries starting at 1".to_string());
        }
        if ab.windows(2).any(|w| w[1] >= w[0]) {
            errs.push("alpha_bar must be strictly decreasing".to_string());
        }
        if ab.last().is_none_or(|v| *v <= 0.0) {
            errs.push("alpha_bar[T] must be positive".to_string());
        }
        if (1..=self.steps).any(|t| !(self.beta(t) > 0.0 && self.beta(t) < 1.0)) {
            errs.push("every beta must lie in (0, 1)".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TtmError::Validation(errs))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedules always serialize")
    }

    pub fn content_hash(&self) -> String {
        crate::tensor::hash_bytes(self.to_json().as_bytes())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleKind::Cosine, DEFAULT_STEPS).expect("default schedule is valid")
    }
}
