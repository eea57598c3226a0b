//! Region-dependent dual-clock denoising.
//!
//! Sampling starts from the reference noised to `t_weak`. While
//! `t > t_strong`, every step's masked voxels are replaced by the reference
//! noised to `t - 1`; from `t_strong` down the whole state denoises freely.
//! Masked regions therefore follow the reference on the strong clock while
//! everything else runs on the weak one.

use ndarray::{Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddpm_step_clipped, forward_noise, forward_noise_with, standard_normal_like, Denoiser, VideoState};
use crate::error::{Result, TtmError};
use crate::tensor::{MaskVideo, SourceImage, Video};

/// `(t_weak, t_strong)` for a 50-step schedule on the reference backbone.
pub const REFERENCE_CLOCKS: (usize, usize) = (36, 25);
/// `(t_weak, t_strong)` used for the larger backbone.
pub const LARGE_BACKBONE_CLOCKS: (usize, usize) = (46, 41);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    DualClock,
    SingleClock,
    RepaintStyle,
    UnconstrainedBg,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceNoiseMode {
    /// Fresh noise for the reference at every override step.
    #[default]
    FreshPerStep,
    /// The initialization noise, rescaled to each step.
    SharedEpsilon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub t_weak: usize,
    pub t_strong: usize,
    pub regime: Regime,
    pub seed: u64,
    #[serde(default)]
    pub reference_noise_mode: ReferenceNoiseMode,
}

impl SamplerConfig {
    pub fn dual_clock(t_weak: usize, t_strong: usize, seed: u64) -> Self {
        Self { t_weak, t_strong, regime: Regime::DualClock, seed, reference_noise_mode: ReferenceNoiseMode::default() }
    }

    pub fn single_clock(t: usize, seed: u64) -> Self {
        Self { regime: Regime::SingleClock, ..Self::dual_clock(t, t, seed) }
    }

    pub fn repaint_style(t_weak: usize, seed: u64) -> Self {
        Self { regime: Regime::RepaintStyle, ..Self::dual_clock(t_weak, 0, seed) }
    }

    pub fn unconstrained_bg(steps: usize, t_strong: usize, seed: u64) -> Self {
        Self { regime: Regime::UnconstrainedBg, ..Self::dual_clock(steps, t_strong, seed) }
    }

    pub fn with_noise_mode(mut self, mode: ReferenceNoiseMode) -> Self {
        self.reference_noise_mode = mode;
        self
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.t_strong <= self.t_weak && self.t_weak <= steps) {
            errs.push(format!(
                "need 0 <= t_strong ({}) <= t_weak ({}) <= T ({steps})",
                self.t_strong, self.t_weak
            ));
        }
        match self.regime {
            Regime::SingleClock if self.t_strong != self.t_weak => {
                errs.push("single_clock requires t_strong == t_weak".into())
            }
            Regime::RepaintStyle if self.t_strong != 0 => errs.push("repaint_style requires t_strong == 0".into()),
            Regime::UnconstrainedBg if self.t_weak != steps => {
                errs.push("unconstrained_bg requires t_weak == T".into())
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TtmError::Validation(errs))
        }
    }
}

/// Binary mask at the sampling state's resolution `(F, H, W)`, broadcast
/// over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMask(pub MaskVideo);

impl GuidanceMask {
    pub fn new(mask: MaskVideo) -> Self {
        Self(mask)
    }

    pub fn zeros(dim: (usize, usize, usize)) -> Self {
        Self(MaskVideo::from_elem(dim, false))
    }

    pub fn ones(dim: (usize, usize, usize)) -> Self {
        Self(MaskVideo::from_elem(dim, true))
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|m| **m).count()
    }
}

/// Nearest-neighbor projection of a pixel mask video to a coarser
/// (latent) grid: target index `i` reads source index `min(i * factor, n-1)`
/// along time and both spatial axes.
pub fn project_mask(
    mask: &MaskVideo,
    target: (usize, usize, usize),
    temporal_factor: usize,
    spatial_factor: usize,
) -> Result<GuidanceMask> {
    let (f, h, w) = mask.dim();
    let (tf, th, tw) = target;
    if tf > f || th > h || tw > w {
        return Err(TtmError::Shape(format!("cannot upsample mask {:?} to {target:?}", mask.dim())));
    }
    if temporal_factor == 0 || spatial_factor == 0 {
        return Err(TtmError::invalid("projection factors must be positive"));
    }
    let expect = |n: usize, k: usize| n.div_ceil(k);
    let near = |a: usize, b: usize| a.abs_diff(b) <= 1;
    let temporal_ok = near(tf, expect(f, temporal_factor)) || near(tf, 1 + (f - 1) / temporal_factor);
    if !temporal_ok || !near(th, expect(h, spatial_factor)) || !near(tw, expect(w, spatial_factor)) {
        return Err(TtmError::Shape(format!(
            "target {target:?} is inconsistent with {:?} under factors ({temporal_factor}, {spatial_factor})",
            mask.dim()
        )));
    }
    let pick = |i: usize, k: usize, n: usize| (i * k).min(n - 1);
    Ok(GuidanceMask(MaskVideo::from_shape_fn(target, |(a, b, c)| {
        mask[[pick(a, temporal_factor, f), pick(b, spatial_factor, h), pick(c, spatial_factor, w)]]
    })))
}

/// One reverse step as seen by an observer.
pub struct StepRecord<'a> {
    /// The step being taken, `t -> t - 1`.
    pub t: usize,
    pub state: &'a Video,
    /// The model's ancestral proposal for `x_{t-1}`.
    pub proposal: &'a Video,
    /// The reference noised to `t - 1`, present only on override steps.
    pub reference: Option<&'a Video>,
    /// The accepted `x_{t-1}`.
    pub next: &'a Video,
    /// Number of voxels (times channels) taken from the reference.
    pub override_writes: usize,
}

pub trait SamplerObserver {
    fn on_step(&mut self, record: &StepRecord<'_>);
}

/// Observer that ignores everything.
pub struct NoObserver;

impl SamplerObserver for NoObserver {
    fn on_step(&mut self, _: &StepRecord<'_>) {}
}

impl<F: FnMut(&StepRecord<'_>)> SamplerObserver for F {
    fn on_step(&mut self, record: &StepRecord<'_>) {
        self(record)
    }
}

/// Owned copy of a [`StepRecord`].
#[derive(Clone, Debug)]
pub struct StepSnapshot {
    pub t: usize,
    pub state: Video,
    pub proposal: Video,
    pub reference: Option<Video>,
    pub next: Video,
    pub override_writes: usize,
}

#[derive(Default)]
pub struct RecordingObserver {
    pub steps: Vec<StepSnapshot>,
}

impl SamplerObserver for RecordingObserver {
    fn on_step(&mut self, r: &StepRecord<'_>) {
        self.steps.push(StepSnapshot {
            t: r.t,
            state: r.state.clone(),
            proposal: r.proposal.clone(),
            reference: r.reference.cloned(),
            next: r.next.clone(),
            override_writes: r.override_writes,
        });
    }
}

fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let chain = ChaCha8Rng::seed_from_u64(seed);
    let mut reference = ChaCha8Rng::seed_from_u64(seed);
    reference.set_stream(1);
    (chain, reference)
}

/// Runs dual-clock sampling and returns `x_0`.
///
/// Randomness comes from two independent streams derived from the seed:
/// one drives initialization and ancestral noise, the other noises the
/// reference on override steps. Masked-out voxels therefore evolve exactly
/// as in plain SDEdit from `t_weak` with the same seed.
pub fn sample(
    denoiser: &dyn Denoiser,
    reference: &Video,
    mask: &GuidanceMask,
    config: &SamplerConfig,
    condition: &SourceImage,
    text: Option<&str>,
    observer: &mut dyn SamplerObserver,
) -> Result<Video> {
    let schedule = denoiser.schedule();
    config.validate(schedule.steps)?;
    let (f, c, h, w) = reference.dim();
    if mask.dim() != (f, h, w) {
        return Err(TtmError::Shape(format!(
            "mask {:?} does not match reference {:?}",
            mask.dim(),
            reference.dim()
        )));
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(TtmError::invalid("reference has non-finite values"));
    }
    let (mut chain_rng, mut ref_rng) = streams(config.seed);

    let init_eps = (config.t_weak > 0).then(|| standard_normal_like(reference.dim(), &mut chain_rng));
    let mut x = match &init_eps {
        Some(eps) => forward_noise_with(reference, config.t_weak, schedule, eps),
        None => reference.clone(),
    };
    let selected = mask.count() * c;
    let range = denoiser.data_range();

    for t in (1..=config.t_weak).rev() {
        let state = VideoState::new(x, t);
        let eps_hat = denoiser.predict(&state, condition, text)?;
        let proposal = ddpm_step_clipped(&state.values, t, &eps_hat, schedule, range, &mut chain_rng)?;
        let (next, noised_ref, writes) = if t > config.t_strong {
            let noised = match (config.reference_noise_mode, &init_eps) {
                (ReferenceNoiseMode::SharedEpsilon, Some(eps)) => forward_noise_with(reference, t - 1, schedule, eps),
                _ => forward_noise(reference, t - 1, schedule, &mut ref_rng)?,
            };
            let mut next = proposal.clone();
            for (mut dst, src) in next.axis_iter_mut(Axis(1)).zip(noised.axis_iter(Axis(1))) {
                Zip::from(&mut dst).and(&src).and(&mask.0).for_each(|d, &s, &m| {
                    if m {
                        *d = s
                    }
                });
            }
            (next, Some(noised), selected)
        } else {
            (proposal.clone(), None, 0)
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(TtmError::Diverged { step: t, detail: "non-finite sampler state".into() });
        }
        observer.on_step(&StepRecord {
            t,
            state: &state.values,
            proposal: &proposal,
            reference: noised_ref.as_ref(),
            next: &next,
            override_writes: writes,
        });
        x = next;
    }
    Ok(x)
}

/// Plain SDEdit from `t_star`: the sampler with an empty mask.
pub fn sdedit_baseline(
    denoiser: &dyn Denoiser,
    reference: &Video,
    t_star: usize,
    condition: &SourceImage,
    text: Option<&str>,
    seed: u64,
) -> Result<Video> {
    let (f, _, h, w) = reference.dim();
    sample(
        denoiser,
        reference,
        &GuidanceMask::zeros((f, h, w)),
        &SamplerConfig::single_clock(t_star, seed),
        condition,
        text,
        &mut NoObserver,
    )
}

/// Symbolic clock value in an ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockLabel {
    Full,
    Weak,
    Strong,
    Zero,
}

impl ClockLabel {
    pub fn resolve(self, steps: usize, t_weak: usize, t_strong: usize) -> usize {
        match self {
            ClockLabel::Full => steps,
            ClockLabel::Weak => t_weak,
            ClockLabel::Strong => t_strong,
            ClockLabel::Zero => 0,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            ClockLabel::Full => "T",
            ClockLabel::Weak => "t_weak",
            ClockLabel::Strong => "t_strong",
            ClockLabel::Zero => "0",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub start: ClockLabel,
    pub stop: ClockLabel,
    pub regime: Regime,
}

/// The eight `(t1, t2)` rows compared in the clock ablation.
pub fn ablation_settings() -> Vec<AblationSetting> {
    use ClockLabel::*;
    use Regime::*;
    let row = |start, stop, regime| AblationSetting { start, stop, regime };
    vec![
        row(Weak, Weak, SingleClock),
        row(Strong, Strong, SingleClock),
        row(Full, Zero, RepaintStyle),
        row(Weak, Zero, RepaintStyle),
        row(Strong, Zero, RepaintStyle),
        row(Full, Weak, UnconstrainedBg),
        row(Full, Strong, UnconstrainedBg),
        row(Weak, Strong, DualClock),
    ]
}

impl AblationSetting {
    pub fn config(&self, steps: usize, t_weak: usize, t_strong: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            t_weak: self.start.resolve(steps, t_weak, t_strong),
            t_strong: self.stop.resolve(steps, t_weak, t_strong),
            regime: self.regime,
            seed,
            reference_noise_mode: ReferenceNoiseMode::default(),
        }
    }

    pub fn label(&self) -> String {
        format!("({}, {})", self.start.symbol(), self.stop.symbol())
    }
}

pub struct AblationRun {
    pub setting: AblationSetting,
    pub config: SamplerConfig,
    pub output: Video,
}

/// Samples every ablation row with the same seed and inputs.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_grid(
    denoiser: &dyn Denoiser,
    reference: &Video,
    mask: &GuidanceMask,
    condition: &SourceImage,
    text: Option<&str>,
    clocks: (usize, usize),
    seed: u64,
) -> Result<Vec<AblationRun>> {
    let steps = denoiser.schedule().steps;
    ablation_settings()
        .into_iter()
        .map(|setting| {
            let config = setting.config(steps, clocks.0, clocks.1, seed);
            let output = sample(denoiser, reference, mask, &config, condition, text, &mut NoObserver)?;
            Ok(AblationRun { setting, config, output })
        })
        .collect()
}

/// Projects a pixel mask video to the sampling grid of `reference`, or
/// passes it through when the resolutions already match.
pub fn guidance_for(mask: &MaskVideo, reference: &Video) -> Result<GuidanceMask> {
    let (f, _, h, w) = reference.dim();
    if mask.dim() == (f, h, w) {
        return Ok(GuidanceMask(mask.clone()));
    }
    let (mf, mh, _) = mask.dim();
    let sf = mh / h.max(1);
    let tf = if f > 1 { ((mf - 1) / (f - 1)).max(1) } else { 1 };
    project_mask(mask, (f, h, w), tf, sf.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{GaussianDenoiser, NoiseSchedule};
    use ndarray::Array4;

    fn setup() -> (GaussianDenoiser, Video, SourceImage) {
        let sched = NoiseSchedule::default();
        let den = GaussianDenoiser::new(0.5, 0.04, sched).unwrap();
        let reference = Array4::from_shape_fn((3, 3, 8, 8), |(f, c, y, x)| ((f + c + y * x) % 5) as f32 / 5.0);
        let cond = SourceImage::new(reference.index_axis(Axis(0), 0).to_owned()).unwrap();
        (den, reference, cond)
    }

    #[test]
    fn regime_constraints() {
        assert!(SamplerConfig::dual_clock(36, 25, 0).validate(50).is_ok());
        assert!(SamplerConfig::dual_clock(25, 36, 0).validate(50).is_err());
        assert!(SamplerConfig::dual_clock(51, 0, 0).validate(50).is_err());
        let mut c = SamplerConfig::single_clock(30, 0);
        c.t_strong = 29;
        assert!(c.validate(50).is_err());
        assert!(SamplerConfig::unconstrained_bg(49, 10, 0).validate(50).is_err());
    }

    #[test]
    fn call_count_and_writes() {
        let (den, reference, cond) = setup();
        let counter = crate::diffusion::CountingDenoiser::new(&den);
        let mut mask = GuidanceMask::zeros((3, 8, 8));
        mask.0[[1, 2, 2]] = true;
        mask.0[[2, 0, 5]] = true;
        let mut rec = RecordingObserver::default();
        sample(&counter, &reference, &mask, &SamplerConfig::dual_clock(12, 5, 3), &cond, None, &mut rec).unwrap();
        assert_eq!(counter.calls(), 12);
        let ts: Vec<_> = rec.steps.iter().map(|s| s.t).collect();
        assert_eq!(ts, (1..=12).rev().collect::<Vec<_>>());
        for s in &rec.steps {
            assert_eq!(s.override_writes, if s.t > 5 { 2 * 3 } else { 0 });
        }
    }

    #[test]
    fn shared_epsilon_matches_rescaled_init() {
        let (den, reference, cond) = setup();
        let mask = GuidanceMask::ones((3, 8, 8));
        let cfg = SamplerConfig::dual_clock(8, 2, 5).with_noise_mode(ReferenceNoiseMode::SharedEpsilon);
        let mut rec = RecordingObserver::default();
        sample(&den, &reference, &mask, &cfg, &cond, None, &mut rec).unwrap();
        let first = &rec.steps[0];
        let sched = den.schedule();
        let (a0, a1) = (sched.alpha_bar(8), sched.alpha_bar(7));
        let eps = (&first.state - &reference.mapv(|v| v * a0.sqrt() as f32)) / (1.0 - a0).sqrt() as f32;
        let expect = reference.mapv(|v| v * a1.sqrt() as f32) + eps * (1.0 - a1).sqrt() as f32;
        let got = first.reference.as_ref().unwrap();
        assert!(got.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn projection_picks_nearest() {
        let mask = MaskVideo::from_shape_fn((5, 8, 8), |(f, y, x)| (f + y + x) % 2 == 0);
        let p = project_mask(&mask, (2, 4, 4), 4, 2).unwrap();
        for ((f, y, x), v) in p.0.indexed_iter() {
            assert_eq!(*v, mask[[f * 4, y * 2, x * 2]]);
        }
        assert!(project_mask(&mask, (5, 16, 16), 1, 1).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (den, reference, cond) = setup();
        let mask = GuidanceMask::zeros((3, 5, 8));
        let r = sample(&den, &reference, &mask, &SamplerConfig::dual_clock(5, 2, 0), &cond, None, &mut NoObserver);
        assert!(matches!(r, Err(TtmError::Shape(_))));
    }

    #[test]
    fn grid_rows() {
        let rows = ablation_settings();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            assert!(r.config(50, 36, 25, 0).validate(50).is_ok(), "{}", r.label());
        }
    }
}
