//! The toy clock ablation end to end: generate a moving-sprites corpus,
//! train the toy denoiser, then run every ablation row on held-out scenes
//! and score the outputs.

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::toy::{train, ToyArch, ToyModel, TrainConfig};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::Result;
use crate::eval::{evaluate_clip, AblationRow, AblationTable, ClipMetrics, EvalConfig, FlowProvider};
use crate::motion::build_warped_reference;
use crate::sampler::{run_ablation_grid, GuidanceMask};
use crate::sprites::{generate_scenes, SpriteScene, WorldConfig};
use crate::tensor::{SourceImage, Video};

/// Clocks used for the toy model on its 50-step schedule.
pub const TOY_CLOCKS: (usize, usize) = (36, 25);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyExperiment {
    pub world: WorldConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub data_seed: u64,
    pub arch: ToyArch,
    pub train: TrainConfig,
    pub clocks: (usize, usize),
    pub sample_seed: u64,
    pub eval: EvalConfig,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        Self {
            world: WorldConfig { frames: 8, ..WorldConfig::default() },
            train_scenes: 2000,
            eval_scenes: 50,
            data_seed: 7,
            arch: ToyArch::default(),
            train: TrainConfig::default(),
            clocks: TOY_CLOCKS,
            sample_seed: 11,
            eval: EvalConfig::default(),
        }
    }
}

/// Held-out scenes use a seed stream disjoint from the training corpus.
pub fn held_out_seed(data_seed: u64) -> u64 {
    data_seed ^ 0x5eed_0f_e7a1
}

pub fn training_clips(scenes: &[SpriteScene]) -> Vec<Video> {
    scenes.par_iter().map(SpriteScene::render).collect()
}

pub fn train_toy_model(exp: &ToyExperiment, on_step: impl FnMut(usize, f32)) -> Result<ToyModel> {
    let scenes = generate_scenes(&exp.world, exp.train_scenes, exp.data_seed)?;
    let clips = training_clips(&scenes);
    let mut model = ToyModel::new(exp.arch, NoiseSchedule::default(), exp.train.seed);
    train(&mut model, &clips, &exp.train, on_step)?;
    Ok(model)
}

/// Runs the eight ablation rows on every scene and aggregates per row.
pub fn evaluate_ablation(
    denoiser: &dyn Denoiser,
    scenes: &[SpriteScene],
    clocks: (usize, usize),
    seed: u64,
    eval: &EvalConfig,
    provider: &dyn FlowProvider,
) -> Result<AblationTable> {
    let per_scene: Vec<Vec<(crate::sampler::AblationSetting, usize, usize, ClipMetrics)>> = scenes
        .iter()
        .map(|scene| {
            let source = SourceImage::new(scene.render().index_axis(Axis(0), 0).to_owned())?;
            let reference = build_warped_reference(&source, &scene.to_motion_spec())?;
            let initial = reference.mask.index_axis(Axis(0), 0).to_owned();
            let target = scene.centroid_trajectory(0);
            let runs = run_ablation_grid(
                denoiser,
                &reference.frames,
                &GuidanceMask::new(reference.mask.clone()),
                &source,
                None,
                clocks,
                seed,
            )?;
            runs.into_iter()
                .map(|run| {
                    let m = evaluate_clip(&run.output, &initial, &target, provider, eval)?;
                    Ok((run.setting, run.config.t_weak, run.config.t_strong, m))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows = (0..per_scene.first().map_or(0, Vec::len))
        .map(|i| {
            let (setting, t1, t2, _) = per_scene[0][i].clone();
            let clips: Vec<ClipMetrics> = per_scene.iter().map(|s| s[i].3.clone()).collect();
            AblationRow::aggregate(setting, t1, t2, &clips)
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { rows })
}

pub fn held_out_scenes(exp: &ToyExperiment) -> Result<Vec<SpriteScene>> {
    generate_scenes(&exp.world, exp.eval_scenes, held_out_seed(exp.data_seed))
}
