//! Synthetic moving-sprites world used to train and evaluate the toy
//! denoiser.
//!
//! Every scene is a muted low-frequency background with an animated
//! "water" band plus one or more saturated sprites moving by integer steps.
//! Everything is rendered in closed form, so masks, trajectories and dense
//! flow are exact.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtmError};
use crate::motion::{Keyframe, MotionSpec, Region};
use crate::tensor::{mask_centroid, to_rgb8, Mask, MaskVideo, SourceImage, Video};

pub const GENERATOR_VERSION: u32 = 1;

/// Per-frame dense flow `(F - 1, 2, H, W)`, channel 0 = dx, 1 = dy, mapping
/// frame `f` to frame `f + 1`.
pub type FlowVideo = Array4<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    /// Whether offset `(dx, dy)` from the sprite center is covered.
    pub fn covers(self, size: i64, dx: i64, dy: i64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= size * size,
            Shape::Square => dx.abs() <= size && dy.abs() <= size,
            Shape::Triangle => dy.abs() <= size && 2 * dx.abs() <= dy + size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    pub color: [f32; 3],
    /// Half-extent in pixels.
    pub size: i64,
    /// Integer center `(x, y)` per frame.
    pub trajectory: Vec<(i64, i64)>,
}

impl Sprite {
    pub fn mask(&self, frame: usize, height: usize, width: usize) -> Mask {
        let (cx, cy) = self.trajectory[frame];
        Mask::from_shape_fn((height, width), |(y, x)| self.shape.covers(self.size, x as i64 - cx, y as i64 - cy))
    }

    pub fn velocity(&self, frame: usize) -> (i64, i64) {
        let (a, b) = (self.trajectory[frame], self.trajectory[frame + 1]);
        (b.0 - a.0, b.1 - a.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f32; 3],
    /// Amplitude, spatial frequencies (cycles per canvas) and phase of a
    /// gentle two-dimensional ripple on top of the base color.
    pub ripple: (f32, f32, f32, f32),
    /// Rows `[start, end)` covered by water.
    pub water_rows: (usize, usize),
    pub water_color: [f32; 3],
    pub water_amplitude: f32,
    pub water_period: f32,
    pub water_slant: f32,
    /// Integer horizontal offset of the water texture per frame, relative to
    /// the first frame.
    pub water_offsets: Vec<i64>,
}

impl Background {
    pub fn in_water(&self, y: usize) -> bool {
        (self.water_rows.0..self.water_rows.1).contains(&y)
    }

    fn pixel(&self, frame: usize, y: usize, x: usize, height: usize, width: usize) -> [f32; 3] {
        if self.in_water(y) {
            let u = (x as f32 - self.water_offsets[frame] as f32 + self.water_slant * y as f32) / self.water_period;
            let v = self.water_amplitude * (std::f32::consts::TAU * u).sin();
            return self.water_color.map(|c| (c + v).clamp(0.0, 1.0));
        }
        let (amp, fy, fx, phase) = self.ripple;
        let v = amp
            * (std::f32::consts::TAU * (fy * y as f32 / height as f32 + fx * x as f32 / width as f32) + phase).sin();
        self.base.map(|c| (c + v).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteScene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprites: Vec<Sprite>,
    pub background: Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprites: usize,
    pub min_size: i64,
    pub max_size: i64,
    /// Per-axis speed range in pixels per frame.
    pub max_speed: i64,
    pub min_speed: i64,
    pub water: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, frames: 16, sprites: 1, min_size: 3, max_size: 4, min_speed: 1, max_speed: 2, water: true }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.height < 16 || self.width < 16 {
            errs.push("canvas must be at least 16x16".to_string());
        }
        if self.frames < 2 {
            errs.push("need at least 2 frames".into());
        }
        if self.sprites == 0 {
            errs.push("need at least one sprite".into());
        }
        if self.min_size < 1 || self.max_size < self.min_size {
            errs.push("sprite size range is empty".into());
        }
        if self.min_speed < 0 || self.max_speed < self.min_speed {
            errs.push("speed range is empty".into());
        }
        let travel = self.max_speed * (self.frames as i64 - 1) + 2 * self.max_size + 2;
        if travel >= self.height.min(self.width) as i64 {
            errs.push("sprites cannot stay in bounds for this speed and length".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TtmError::Validation(errs))
        }
    }
}

const PALETTE: [[f32; 3]; 5] = [
    [0.92, 0.12, 0.10],
    [0.10, 0.85, 0.15],
    [0.95, 0.88, 0.08],
    [0.90, 0.10, 0.85],
    [1.00, 0.55, 0.00],
];

fn random_sprite(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Sprite {
    let shape = [Shape::Disk, Shape::Square, Shape::Triangle][rng.random_range(0..3)];
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    let size = rng.random_range(cfg.min_size..=cfg.max_size);
    let mut axis_speed = || {
        let s = rng.random_range(cfg.min_speed..=cfg.max_speed);
        if rng.random_bool(0.5) {
            -s
        } else {
            s
        }
    };
    let (vx, vy) = (axis_speed(), axis_speed());
    let span = cfg.frames as i64 - 1;
    let mut start = |v: i64, extent: usize| {
        let lo = size.max(size - v * span);
        let hi = (extent as i64 - 1 - size).min(extent as i64 - 1 - size - v * span);
        rng.random_range(lo..=hi)
    };
    let (x0, y0) = (start(vx, cfg.width), start(vy, cfg.height));
    let trajectory = (0..cfg.frames as i64).map(|f| (x0 + vx * f, y0 + vy * f)).collect();
    Sprite { shape, color, size, trajectory }
}

fn overlaps(a: &Sprite, b: &Sprite) -> bool {
    a.trajectory
        .iter()
        .zip(&b.trajectory)
        .any(|(p, q)| (p.0 - q.0).abs() <= a.size + b.size + 1 && (p.1 - q.1).abs() <= a.size + b.size + 1)
}

impl SpriteScene {
    /// Draws a random scene. Sprites never overlap in any frame, so each
    /// pixel belongs to at most one moving object.
    pub fn random(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut sprites: Vec<Sprite> = Vec::new();
        let mut attempts = 0;
        while sprites.len() < cfg.sprites {
            attempts += 1;
            if attempts > 1000 {
                return Err(TtmError::invalid("could not place non-overlapping sprites"));
            }
            let s = random_sprite(cfg, rng);
            if sprites.iter().all(|o| !overlaps(o, &s)) {
                sprites.push(s);
            }
        }
        let gray = rng.random_range(0.35..0.55);
        let tint = [rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)];
        let base = [gray + tint[0], gray + tint[1], gray + tint[2]];
        let ripple = (
            rng.random_range(0.03..0.08),
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.0..std::f32::consts::TAU),
        );
        let (water_rows, offsets) = if cfg.water {
            let band = (cfg.height / 4).max(4);
            let start = rng.random_range(0..=cfg.height - band);
            let mut offsets = vec![0i64];
            offsets.extend((1..cfg.frames).map(|_| rng.random_range(-1..=1)));
            ((start, start + band), offsets)
        } else {
            ((0, 0), vec![0; cfg.frames])
        };
        let background = Background {
            base,
            ripple,
            water_rows,
            water_color: [rng.random_range(0.1..0.2), rng.random_range(0.25..0.4), rng.random_range(0.55..0.7)],
            water_amplitude: rng.random_range(0.12..0.18),
            water_period: rng.random_range(8.0..12.0),
            water_slant: rng.random_range(-0.5..0.5),
            water_offsets: offsets,
        };
        Ok(Self { height: cfg.height, width: cfg.width, frames: cfg.frames, sprites, background })
    }

    pub fn render(&self) -> Video {
        let mut v = Video::zeros((self.frames, 3, self.height, self.width));
        for f in 0..self.frames {
            let masks: Vec<Mask> = self.sprites.iter().map(|s| s.mask(f, self.height, self.width)).collect();
            for y in 0..self.height {
                for x in 0..self.width {
                    let rgb = match masks.iter().position(|m| m[[y, x]]) {
                        Some(i) => self.sprites[i].color,
                        None => self.background.pixel(f, y, x, self.height, self.width),
                    };
                    for c in 0..3 {
                        v[[f, c, y, x]] = rgb[c];
                    }
                }
            }
        }
        v
    }

    /// Union of all sprite masks, per frame.
    pub fn masks(&self) -> MaskVideo {
        let mut out = MaskVideo::from_elem((self.frames, self.height, self.width), false);
        for f in 0..self.frames {
            for s in &self.sprites {
                out.index_axis_mut(Axis(0), f).zip_mut_with(&s.mask(f, self.height, self.width), |o, m| *o |= *m);
            }
        }
        out
    }

    /// Mask-centroid trajectory `(x, y)` of sprite `i`.
    pub fn centroid_trajectory(&self, i: usize) -> Vec<(f64, f64)> {
        (0..self.frames)
            .map(|f| mask_centroid(&self.sprites[i].mask(f, self.height, self.width)).expect("sprites are in bounds"))
            .collect()
    }

    /// Dense forward flow. Sprite pixels move with their sprite; water
    /// pixels shift horizontally with the texture; everything else is
    /// static.
    pub fn flow(&self) -> FlowVideo {
        let (h, w) = (self.height, self.width);
        let mut flow = FlowVideo::zeros((self.frames - 1, 2, h, w));
        for f in 0..self.frames - 1 {
            let masks: Vec<Mask> = self.sprites.iter().map(|s| s.mask(f, h, w)).collect();
            let water = (self.background.water_offsets[f + 1] - self.background.water_offsets[f]) as f32;
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = match masks.iter().position(|m| m[[y, x]]) {
                        Some(i) => {
                            let v = self.sprites[i].velocity(f);
                            (v.0 as f32, v.1 as f32)
                        }
                        None if self.background.in_water(y) => (water, 0.0),
                        None => (0.0, 0.0),
                    };
                    flow[[f, 0, y, x]] = dx;
                    flow[[f, 1, y, x]] = dy;
                }
            }
        }
        flow
    }

    pub fn first_frame(&self) -> Result<SourceImage> {
        SourceImage::new(self.render().index_axis(Axis(0), 0).to_owned())
    }

    /// Cut-and-drag spec that moves each sprite's first-frame mask along
    /// its ground-truth trajectory.
    pub fn to_motion_spec(&self) -> MotionSpec {
        let regions = self
            .sprites
            .iter()
            .map(|s| {
                let (x0, y0) = s.trajectory[0];
                let keyframes = s
                    .trajectory
                    .iter()
                    .enumerate()
                    .map(|(f, &(x, y))| Keyframe::translate(f, (x - x0) as f64, (y - y0) as f64))
                    .collect();
                Region::new(s.mask(0, self.height, self.width), keyframes)
            })
            .collect();
        MotionSpec { frame_count: self.frames, regions }
    }
}

/// Per-scene seeds are derived from the dataset seed, so scenes can be
/// generated independently and in parallel.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random()
}

pub fn generate_scenes(cfg: &WorldConfig, n_scenes: usize, seed: u64) -> Result<Vec<SpriteScene>> {
    if n_scenes == 0 {
        return Err(TtmError::invalid("n_scenes must be at least 1"));
    }
    cfg.validate()?;
    (0..n_scenes)
        .into_par_iter()
        .map(|i| SpriteScene::random(cfg, &mut ChaCha8Rng::seed_from_u64(scene_seed(seed, i))))
        .collect()
}

/// One generated scene with its ground truth.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub scene: SpriteScene,
    pub video: Video,
    pub masks: MaskVideo,
    pub flow: FlowVideo,
}

impl SceneSample {
    pub fn new(scene: SpriteScene) -> Self {
        Self { video: scene.render(), masks: scene.masks(), flow: scene.flow(), scene }
    }

    pub fn first_frame(&self) -> Array3<f32> {
        self.video.index_axis(Axis(0), 0).to_owned()
    }
}

pub fn generate_dataset(cfg: &WorldConfig, n_scenes: usize, seed: u64) -> Result<Vec<SceneSample>> {
    Ok(generate_scenes(cfg, n_scenes, seed)?.into_par_iter().map(SceneSample::new).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: u32,
    pub seed: u64,
    pub n_scenes: usize,
    pub world: WorldConfig,
    pub scenes: Vec<String>,
}

/// Writes `scene_XXXXX/` directories (frame PNGs, mask PNGs, `scene.json`
/// with trajectories, `flow.bin` as little-endian f32 in `(F-1, 2, H, W)`
/// order) and a top-level `manifest.json`.
pub fn write_dataset(dir: &Path, cfg: &WorldConfig, n_scenes: usize, seed: u64) -> Result<DatasetManifest> {
    let scenes = generate_scenes(cfg, n_scenes, seed)?;
    fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..n_scenes).map(|i| format!("scene_{i:05}")).collect();
    scenes.par_iter().zip(&names).try_for_each(|(scene, name)| -> Result<()> {
        let sample = SceneSample::new(scene.clone());
        let sdir = dir.join(name);
        fs::create_dir_all(&sdir)?;
        for (f, frame) in sample.video.outer_iter().enumerate() {
            to_rgb8(frame).save(sdir.join(format!("frame_{f:04}.png")))?;
            crate::tensor::mask_to_luma8(&sample.masks.index_axis(Axis(0), f).to_owned())
                .save(sdir.join(format!("mask_{f:04}.png")))?;
        }
        fs::write(sdir.join("scene.json"), serde_json::to_string_pretty(scene)?)?;
        let bytes: Vec<u8> = sample.flow.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(sdir.join("flow.bin"), bytes)?;
        Ok(())
    })?;
    let manifest =
        DatasetManifest { generator_version: GENERATOR_VERSION, seed, n_scenes, world: cfg.clone(), scenes: names };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads scenes from a directory written by [`write_dataset`]; videos are
/// re-rendered from `scene.json`.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SpriteScene>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.generator_version != GENERATOR_VERSION {
        return Err(TtmError::invalid(format!("unsupported generator version {}", manifest.generator_version)));
    }
    let scenes = manifest
        .scenes
        .iter()
        .map(|name| Ok(serde_json::from_str(&fs::read_to_string(dir.join(name).join("scene.json"))?)?))
        .collect::<Result<Vec<SpriteScene>>>()?;
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig { frames: 8, ..WorldConfig::default() }
    }

    #[test]
    fn sprites_stay_in_bounds() {
        for scene in generate_scenes(&small(), 40, 3).unwrap() {
            for s in &scene.sprites {
                for &(x, y) in &s.trajectory {
                    assert!(x - s.size >= 0 && y - s.size >= 0);
                    assert!(x + s.size < 64 && y + s.size < 64);
                }
                assert_eq!(s.mask(0, 64, 64).iter().filter(|m| **m).count(), s.mask(7, 64, 64).iter().filter(|m| **m).count());
            }
        }
    }

    #[test]
    fn static_sprite_has_zero_flow() {
        let cfg = WorldConfig { min_speed: 0, max_speed: 0, water: false, ..small() };
        let scene = SpriteScene::random(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(scene.flow().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn translating_sprite_flow_inside_mask() {
        let cfg = WorldConfig { water: false, ..small() };
        let mut scene = SpriteScene::random(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let s = &mut scene.sprites[0];
        s.trajectory = (0..8).map(|f| (20 + 2 * f, 30)).collect();
        let flow = scene.flow();
        let m = scene.sprites[0].mask(3, 64, 64);
        for ((y, x), inside) in m.indexed_iter() {
            let expect = if *inside { (2.0, 0.0) } else { (0.0, 0.0) };
            assert_eq!((flow[[3, 0, y, x]], flow[[3, 1, y, x]]), expect);
        }
    }

    #[test]
    fn water_texture_shifts_by_flow() {
        let scene = SpriteScene::random(&small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let v = scene.render();
        let flow = scene.flow();
        let masks = scene.masks();
        let (r0, r1) = scene.background.water_rows;
        for f in 0..7 {
            for y in r0..r1 {
                for x in 0..64 {
                    let nx = x as i64 + flow[[f, 0, y, x]] as i64;
                    if (0..64).contains(&nx) && !masks[[f, y, x]] && !masks[[f + 1, y, nx as usize]] {
                        for c in 0..3 {
                            assert!((v[[f, c, y, x]] - v[[f + 1, c, y, nx as usize]]).abs() < 1e-5);
                        }
                    }
                }
            }
        }
    }
}
