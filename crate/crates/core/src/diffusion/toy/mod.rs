//! Desk-scale image-conditioned video denoiser.
//!
//! Each voxel sees the noisy state, the clean condition frame (channel
//! concatenation), the noise implied if the voxel were unchanged from the
//! condition frame (soft-clipped), its normalized frame index and the noise
//! level. The network adds a correction to that implied noise.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{CheckpointHeader, CHECKPOINT_FORMAT_VERSION};
pub use net::{ConvNet, ConvSpec, Grid, Scalar};
pub use train::{
    loss_and_grad, make_batch, train, AdamState, TrainConfig, TrainReport, TrainSample, TrainState, TrainingData,
};

use ndarray::ArrayView3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, NoiseSchedule, VideoState};
use crate::error::{Result, TtmError};
use crate::tensor::{SourceImage, Video};

pub const FEATURES: usize = 12;
const CLIP: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyArch {
    pub hidden: usize,
    /// Number of (temporal 3, spatial 3x3) pairs after the input layer.
    #[serde(default = "one")]
    pub blocks: usize,
}

fn one() -> usize {
    1
}

impl Default for ToyArch {
    fn default() -> Self {
        Self { hidden: 12, blocks: 2 }
    }
}

impl ToyArch {
    pub fn specs(&self) -> Vec<ConvSpec> {
        let h = self.hidden;
        let mut specs = vec![ConvSpec { kt: 1, kh: 3, kw: 3, cin: FEATURES, cout: h, activation: true }];
        for _ in 0..self.blocks {
            specs.push(ConvSpec { kt: 3, kh: 1, kw: 1, cin: h, cout: h, activation: true });
            specs.push(ConvSpec { kt: 1, kh: 3, kw: 3, cin: h, cout: h, activation: true });
        }
        specs.push(ConvSpec { kt: 1, kh: 1, kw: 1, cin: h, cout: 3, activation: false });
        specs
    }
}

#[inline]
fn soft_clip(x: f64) -> f64 {
    x / (1.0 + (x / CLIP).powi(2)).sqrt()
}

/// Builds channels-last input features and the soft-clipped implied noise
/// (channels-last, 3 per voxel) that the network output is added to.
pub fn features<S: Scalar>(
    values: &Video,
    t: usize,
    condition: ArrayView3<'_, f32>,
    schedule: &NoiseSchedule,
) -> (Vec<S>, Vec<S>, Grid) {
    let (frames, _, height, width) = values.dim();
    let grid = Grid { frames, height, width };
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt().max(1e-12));
    let mut feats = Vec::with_capacity(grid.voxels() * FEATURES);
    let mut implied = Vec::with_capacity(grid.voxels() * 3);
    let denom = (frames.max(2) - 1) as f64;
    for f in 0..frames {
        let pos = 2.0 * f as f64 / denom - 1.0;
        for y in 0..height {
            for x in 0..width {
                let mut e = [0.0f64; 3];
                for c in 0..3 {
                    let xt = values[[f, c, y, x]] as f64;
                    e[c] = soft_clip((xt - sa * condition[[c, y, x]] as f64) / sn);
                }
                for c in 0..3 {
                    feats.push(S::from(values[[f, c, y, x]]).unwrap());
                }
                for c in 0..3 {
                    feats.push(S::from(2.0 * condition[[c, y, x]] as f64 - 1.0).unwrap());
                }
                for v in e {
                    feats.push(S::from(v).unwrap());
                    implied.push(S::from(v).unwrap());
                }
                feats.push(S::from(pos).unwrap());
                feats.push(S::from(sa).unwrap());
                feats.push(S::from(sn).unwrap());
            }
        }
    }
    (feats, implied, grid)
}

pub(crate) fn channels_last_to_video<S: Scalar>(data: &[S], grid: Grid) -> Video {
    let Grid { frames, height, width } = grid;
    Video::from_shape_fn((frames, 3, height, width), |(f, c, y, x)| {
        data[((f * height + y) * width + x) * 3 + c].to_f32().unwrap()
    })
}

/// The trainable toy denoiser plus its training provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub arch: ToyArch,
    pub net: ConvNet<f32>,
    pub schedule: NoiseSchedule,
    pub train_state: Option<TrainState>,
    pub optimizer: Option<AdamState>,
}

impl ToyModel {
    /// Fresh weights: small random hidden layers, zero output layer, so an
    /// untrained model predicts exactly the implied noise.
    pub fn new(arch: ToyArch, schedule: NoiseSchedule, seed: u64) -> Self {
        let specs = arch.specs();
        let mut net = ConvNet::<f32>::zeros(specs.clone());
        let offs = net.offsets();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, spec) in specs.iter().enumerate() {
            if i + 1 == specs.len() {
                continue;
            }
            let fan_in = (spec.kt * spec.kh * spec.kw * spec.cin) as f32;
            let bound = (3.0 / fan_in).sqrt();
            for w in &mut net.params[offs[i]..offs[i] + spec.weight_len()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Self { arch, net, schedule, train_state: None, optimizer: None }
    }

    pub fn predict_values(&self, values: &Video, t: usize, condition: ArrayView3<'_, f32>) -> Result<Video> {
        let (_, c, h, w) = values.dim();
        if c != 3 || condition.dim() != (3, h, w) {
            return Err(TtmError::Shape(format!(
                "toy model needs 3-channel state matching the condition, got {:?} vs {:?}",
                values.dim(),
                condition.dim()
            )));
        }
        if t == 0 || t > self.schedule.steps {
            return Err(TtmError::invalid(format!("toy model needs 1 <= t <= T, got {t}")));
        }
        let (feats, implied, grid) = features::<f32>(values, t, condition, &self.schedule);
        let mut out = self.net.forward(&feats, grid);
        for (o, e) in out.iter_mut().zip(&implied) {
            *o += *e;
        }
        Ok(channels_last_to_video(&out, grid))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, checkpoint::encode(self))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        checkpoint::decode(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }

    pub fn losses(&self) -> &[f32] {
        self.train_state.as_ref().map_or(&[], |s| &s.losses)
    }
}

impl Denoiser for ToyModel {
    fn predict(&self, state: &VideoState, condition: &SourceImage, _text: Option<&str>) -> Result<Video> {
        self.predict_values(&state.values, state.t, condition.view())
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn fingerprint(&self) -> String {
        checkpoint::weights_hash(self)
    }

    fn data_range(&self) -> Option<(f32, f32)> {
        Some((0.0, 1.0))
    }
}
