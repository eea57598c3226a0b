//! Shared generation pipeline and run manifests. The CLI and the service
//! both go through these functions, so identical inputs produce identical
//! artifacts on either path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::depth::{build_camera_reference, read_pfm, CameraPathDocument, DepthMap};
use crate::diffusion::toy::ToyModel;
use crate::diffusion::{Denoiser, GaussianDenoiser, NoiseSchedule, ScheduleKind};
use crate::error::{Result, TtmError};
use crate::motion::{build_warped_reference, MotionSpecDocument, WarpedReference};
use crate::sampler::{guidance_for, sample, SamplerConfig, SamplerObserver};
use crate::tensor::{hash_f32, mask_video_hash, video_hash, SourceImage, Video};

pub const MANIFEST_VERSION: u32 = 1;

/// A file artifact identified by content hash; the path is advisory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionInput {
    Spec { spec: MotionSpecDocument },
    Camera { path: CameraPathDocument, depth: ArtifactRef },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSource {
    Toy { checkpoint: String },
    Gaussian { mean: f64, variance: f64, schedule: ScheduleKind, steps: usize },
}

impl DenoiserSource {
    /// Loads the denoiser; relative checkpoint paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Box<dyn Denoiser>> {
        Ok(match self {
            DenoiserSource::Toy { checkpoint } => {
                let path = resolve(base, checkpoint);
                let bytes = std::fs::read(&path)
                    .map_err(|e| TtmError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
                Box::new(ToyModel::from_bytes(&bytes)?)
            }
            DenoiserSource::Gaussian { mean, variance, schedule, steps } => {
                Box::new(GaussianDenoiser::new(*mean, *variance, NoiseSchedule::new(*schedule, *steps)?)?)
            }
        })
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn depth_hash(depth: &DepthMap) -> String {
    let (h, w) = depth.dim();
    hash_f32(&[h, w], depth.depth.iter().copied())
}

/// Builds the warped reference for either kind of motion input.
pub fn build_reference(image: &SourceImage, motion: &MotionInput, depth: Option<&DepthMap>) -> Result<WarpedReference> {
    match motion {
        MotionInput::Spec { spec } => build_warped_reference(image, &spec.to_spec()?),
        MotionInput::Camera { path, depth: depth_ref } => {
            let depth = depth.ok_or_else(|| TtmError::invalid("camera motion needs a depth map"))?;
            if depth_hash(depth) != depth_ref.sha256 {
                return Err(TtmError::invalid("depth map does not match its recorded hash"));
            }
            if depth.dim() != (image.height(), image.width()) {
                return Err(TtmError::Shape("depth map and image differ in size".into()));
            }
            build_camera_reference(image, depth, &path.to_path()?)
        }
    }
}

/// Loads the depth map a camera input refers to, with intrinsics and axis
/// conventions taken from the camera path document.
pub fn load_depth(motion: &MotionInput, base: &Path) -> Result<Option<DepthMap>> {
    match motion {
        MotionInput::Spec { .. } => Ok(None),
        MotionInput::Camera { path, depth } => {
            let file = depth.path.as_deref().ok_or_else(|| TtmError::invalid("depth reference has no path"))?;
            let values = read_pfm(resolve(base, file))?;
            Ok(Some(DepthMap::new(values, path.intrinsics, path.axis)?))
        }
    }
}

/// Everything needed to bit-reproduce one sampling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub schedule_hash: String,
    pub denoiser: DenoiserSource,
    pub denoiser_hash: String,
    pub image: ArtifactRef,
    pub motion: MotionInput,
    pub reference_hash: String,
    pub mask_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_hash: Option<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifests always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(TtmError::invalid(format!("unsupported manifest version {}", m.format_version)));
        }
        if m.seed != m.sampler.seed {
            return Err(TtmError::invalid("manifest seed disagrees with sampler seed"));
        }
        Ok(m)
    }
}

/// Inputs of one generation, already loaded.
pub struct Generation<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub denoiser_source: DenoiserSource,
    pub image: &'a SourceImage,
    pub image_path: Option<String>,
    pub motion: MotionInput,
    pub depth: Option<&'a DepthMap>,
    pub sampler: SamplerConfig,
    pub text: Option<String>,
}

pub struct GenerationOutput {
    pub video: Video,
    pub reference: WarpedReference,
    pub manifest: RunManifest,
}

pub fn generate(job: Generation<'_>, observer: &mut dyn SamplerObserver) -> Result<GenerationOutput> {
    let reference = build_reference(job.image, &job.motion, job.depth)?;
    let mask = guidance_for(&reference.mask, &reference.frames)?;
    let video = sample(
        job.denoiser,
        &reference.frames,
        &mask,
        &job.sampler,
        job.image,
        job.text.as_deref(),
        observer,
    )?;
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        seed: job.sampler.seed,
        sampler: job.sampler,
        schedule_hash: job.denoiser.schedule().content_hash(),
        denoiser: job.denoiser_source,
        denoiser_hash: job.denoiser.fingerprint(),
        image: ArtifactRef { path: job.image_path, sha256: job.image.content_hash() },
        motion: job.motion,
        reference_hash: video_hash(&reference.frames),
        mask_hash: mask_video_hash(&reference.mask),
        text: job.text,
        result_hash: Some(video_hash(&video)),
    };
    Ok(GenerationOutput { video, reference, manifest })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub result_hash: String,
    pub expected: Option<String>,
    pub matches: bool,
}

/// Re-runs a manifest, checking every recorded input hash on the way, and
/// compares the result hash.
pub fn replay(manifest: &RunManifest, base: &Path) -> Result<(Video, ReplayReport)> {
    let image_path = manifest.image.path.as_deref().ok_or_else(|| TtmError::invalid("manifest image has no path"))?;
    let image = SourceImage::load(resolve(base, image_path))?;
    if image.content_hash() != manifest.image.sha256 {
        return Err(TtmError::invalid("source image does not match the manifest hash"));
    }
    let denoiser = manifest.denoiser.load(base)?;
    if denoiser.fingerprint() != manifest.denoiser_hash {
        return Err(TtmError::Checkpoint("denoiser does not match the manifest hash".into()));
    }
    if denoiser.schedule().content_hash() != manifest.schedule_hash {
        return Err(TtmError::Checkpoint("denoiser schedule does not match the manifest".into()));
    }
    let depth = load_depth(&manifest.motion, base)?;
    let out = generate(
        Generation {
            denoiser: denoiser.as_ref(),
            denoiser_source: manifest.denoiser.clone(),
            image: &image,
            image_path: manifest.image.path.clone(),
            motion: manifest.motion.clone(),
            depth: depth.as_ref(),
            sampler: manifest.sampler,
            text: manifest.text.clone(),
        },
        &mut crate::sampler::NoObserver,
    )?;
    if out.manifest.reference_hash != manifest.reference_hash || out.manifest.mask_hash != manifest.mask_hash {
        return Err(TtmError::invalid("rebuilt reference does not match the manifest"));
    }
    let result_hash = out.manifest.result_hash.clone().unwrap_or_default();
    let matches = manifest.result_hash.as_deref() == Some(result_hash.as_str());
    Ok((out.video, ReplayReport { result_hash, expected: manifest.result_hash.clone(), matches }))
}
