//! Discrete diffusion machinery shared by forward noising and sampling.

mod denoiser;
mod process;
mod schedule;
pub mod toy;

pub use denoiser::{CountingDenoiser, Denoiser, GaussianDenoiser};
pub use process::{ddpm_step, ddpm_step_clipped, forward_noise, forward_noise_with, standard_normal_like, VideoState};
pub use schedule::{cosine_level, NoiseSchedule, ScheduleKind, DEFAULT_STEPS};
