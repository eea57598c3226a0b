//! `ttm` command line: batch entry points over the library and the service.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use serde::Serialize;
use serde_json::json;

use ttm_core::depth::{build_camera_reference, read_pfm, CameraPathDocument, DepthMap};
use ttm_core::diffusion::toy::{train, ToyArch, ToyModel, TrainConfig};
use ttm_core::diffusion::{Denoiser, NoiseSchedule};
use ttm_core::eval::{camera_metrics, evaluate_clip, AblationRow, EvalConfig, FlowRegistry, DEFAULT_ALPHA};
use ttm_core::experiment::{evaluate_ablation, held_out_seed, training_clips, ToyExperiment, TOY_CLOCKS};
use ttm_core::io::{load_video, save_video, write_frames, write_mask_frames};
use ttm_core::motion::{build_warped_reference, MotionSpecDocument, WarpedReference};
use ttm_core::pipeline::{
    depth_hash, generate, replay, ArtifactRef, DenoiserSource, Generation, MotionInput, RunManifest,
};
use ttm_core::sampler::{GuidanceMask, NoObserver, Regime, SamplerConfig, REFERENCE_CLOCKS};
use ttm_core::service::{serve, ServiceConfig};
use ttm_core::sprites::{generate_scenes, read_dataset, write_dataset, WorldConfig};
use ttm_core::tensor::{hash_bytes, SourceImage};
use ttm_core::TtmError;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "ttm", version, about = "Motion-controlled video generation from warped reference videos")]
struct Cli {
    /// Seed for every random choice (default 0); recorded in output
    /// manifests. A manifest replay keeps the manifest's seed unless given.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for dataset generation and batch evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a warped reference video and mask from an image and a motion spec.
    Warp {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a warped reference by reprojecting a depth-lifted image along a camera path.
    CameraWarp {
        #[arg(long)]
        image: PathBuf,
        /// Depth map in PFM format, same size as the image.
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sampler from inputs, or replay a run manifest.
    Generate(GenerateArgs),
    /// Run the eight clock settings on held-out toy scenes and print the table.
    Ablate(AblateArgs),
    /// Train the toy denoiser on a generated moving-sprites corpus.
    TrainToy(TrainArgs),
    /// Write a moving-sprites dataset with masks, trajectories and flow.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        sprites: usize,
    },
    /// Score generated videos: object-motion metrics over a dataset, or
    /// camera metrics of one video against a reference.
    Eval(EvalArgs),
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        storage_root: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegimeArg {
    DualClock,
    SingleClock,
    RepaintStyle,
    UnconstrainedBg,
}

#[derive(Args)]
struct ClockArgs {
    /// Noise level sampling starts from (the weak clock).
    #[arg(long, default_value_t = REFERENCE_CLOCKS.0)]
    t_weak: usize,
    /// Step below which the masked region stops being overridden (the strong clock).
    #[arg(long, default_value_t = REFERENCE_CLOCKS.1)]
    t_strong: usize,
    #[arg(long, value_enum, default_value_t = RegimeArg::DualClock)]
    regime: RegimeArg,
}

impl ClockArgs {
    fn config(&self, steps: usize, seed: u64) -> SamplerConfig {
        match self.regime {
            RegimeArg::DualClock => SamplerConfig::dual_clock(self.t_weak, self.t_strong, seed),
            RegimeArg::SingleClock => SamplerConfig::single_clock(self.t_weak, seed),
            RegimeArg::RepaintStyle => SamplerConfig::repaint_style(self.t_weak, seed),
            RegimeArg::UnconstrainedBg => SamplerConfig::unconstrained_bg(steps, self.t_strong, seed),
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Replay this manifest instead of building a run from flags.
    #[arg(long, conflicts_with_all = ["image", "spec", "camera", "depth", "checkpoint"])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, conflicts_with = "camera")]
    spec: Option<PathBuf>,
    #[arg(long, requires = "depth")]
    camera: Option<PathBuf>,
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Toy denoiser checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    text: Option<String>,
    #[command(flatten)]
    clocks: ClockArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 50)]
    scenes: usize,
    /// Seed of the corpus the held-out scenes are drawn next to.
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    #[arg(long, default_value_t = TOY_CLOCKS.0)]
    t_weak: usize,
    #[arg(long, default_value_t = TOY_CLOCKS.1)]
    t_strong: usize,
    #[arg(long, default_value = "block_matching")]
    flow: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Write the table and manifest as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint when it was trained with the same settings.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = ToyArch::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = ToyArch::default().blocks)]
    blocks: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset written by `gen-dataset`; scenes are generated with the
    /// checkpoint and scored for trajectory adherence and dynamics.
    #[arg(long, requires = "checkpoint", conflicts_with = "video")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    clocks: ClockArgs,
    /// Generated video (`.ttmv`) for camera metrics.
    #[arg(long, requires = "reference")]
    video: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "block_matching")]
    flow: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Marks an error as a bad input (exit 2) regardless of its origin.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct InvalidInput(String);

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidInput(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<InvalidInput>().is_some() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<TtmError>() {
            let bad_input = match e {
                TtmError::Image(_) => true,
                TtmError::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
                e => e.is_validation(),
            };
            return if bad_input { EXIT_VALIDATION } else { EXIT_RUNTIME };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return EXIT_VALIDATION;
            }
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let kind = if code == EXIT_VALIDATION { "validation" } else { "runtime" };
            let chain: Vec<String> = err.chain().map(ToString::to_string).collect();
            eprintln!("{}", json!({ "error": kind, "message": err.to_string(), "causes": chain }));
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Warp { image, spec, out } => cmd_warp(&image, &spec, &out, seed),
        Command::CameraWarp { image, depth, path, out } => cmd_camera_warp(&image, &depth, &path, &out, seed),
        Command::Generate(args) => cmd_generate(args, cli.seed),
        Command::Ablate(args) => cmd_ablate(args, seed),
        Command::TrainToy(args) => cmd_train(args, seed),
        Command::GenDataset { out, scenes, frames, height, width, sprites } => {
            let cfg = WorldConfig { frames, height, width, sprites, ..WorldConfig::default() };
            let manifest = write_dataset(&out, &cfg, scenes, seed)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
            Ok(())
        }
        Command::Eval(args) => cmd_eval(args, seed),
        Command::Serve { config, port, storage_root, checkpoint } => {
            let mut cfg = ServiceConfig::load(config.as_deref(), |k| std::env::var(k).ok())?;
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(r) = storage_root {
                cfg.storage_root = r;
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            log::info!("seed {seed} is unused by the service; jobs carry their own seeds");
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(cfg))?;
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_image(path: &Path) -> Result<SourceImage> {
    SourceImage::load(path).with_context(|| format!("loading image {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Frames, masks, the lossless tensor and a manifest with the content hash.
fn write_reference(out: &Path, reference: &WarpedReference, manifest: serde_json::Value) -> Result<String> {
    write_frames(out, "frame", &reference.frames)?;
    write_mask_frames(out, "mask", &reference.mask)?;
    save_video(&out.join("reference.ttmv"), &reference.frames)?;
    let hash = reference.content_hash();
    let mut manifest = manifest;
    manifest["content_hash"] = json!(hash);
    manifest["warnings"] = json!(reference.warnings);
    write_json(&out.join("manifest.json"), &manifest)?;
    for w in &reference.warnings {
        log::warn!("{w}");
    }
    Ok(hash)
}

fn cmd_warp(image: &Path, spec: &Path, out: &Path, seed: u64) -> Result<()> {
    let img = load_image(image)?;
    let doc = MotionSpecDocument::from_json(&read_text(spec)?)?;
    let spec_value = doc.to_spec()?;
    spec_value.validate(img.height(), img.width())?;
    let reference = build_warped_reference(&img, &spec_value)?;
    let manifest = json!({
        "command": "warp",
        "seed": seed,
        "image": ArtifactRef { path: Some(image.display().to_string()), sha256: img.content_hash() },
        "spec": doc,
    });
    println!("{}", write_reference(out, &reference, manifest)?);
    Ok(())
}

fn load_camera(path: &Path, depth: &Path) -> Result<(CameraPathDocument, DepthMap)> {
    let doc = CameraPathDocument::from_json(&read_text(path)?)?;
    let values = read_pfm(depth).with_context(|| format!("reading depth {}", depth.display()))?;
    let map = DepthMap::new(values, doc.intrinsics, doc.axis)?;
    Ok((doc, map))
}

fn cmd_camera_warp(image: &Path, depth: &Path, path: &Path, out: &Path, seed: u64) -> Result<()> {
    let img = load_image(image)?;
    let (doc, map) = load_camera(path, depth)?;
    let reference = build_camera_reference(&img, &map, &doc.to_path()?)?;
    let manifest = json!({
        "command": "camera-warp",
        "seed": seed,
        "image": ArtifactRef { path: Some(image.display().to_string()), sha256: img.content_hash() },
        "depth": ArtifactRef { path: Some(depth.display().to_string()), sha256: depth_hash(&map) },
        "path": doc,
    });
    println!("{}", write_reference(out, &reference, manifest)?);
    Ok(())
}

fn absolute(p: &Path) -> Result<String> {
    Ok(std::path::absolute(p)?.display().to_string())
}

fn cmd_generate(args: GenerateArgs, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    if let Some(path) = &args.manifest {
        let mut manifest = RunManifest::from_json(&read_text(path)?)?;
        if let Some(seed) = seed.filter(|s| *s != manifest.seed) {
            log::info!("overriding manifest seed {} with --seed {seed}", manifest.seed);
            manifest.seed = seed;
            manifest.sampler.seed = seed;
            manifest.result_hash = None;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let (video, report) = replay(&manifest, base)?;
        save_video(&args.out.join("video.ttmv"), &video)?;
        write_frames(&args.out, "frame", &video)?;
        manifest.result_hash = Some(report.result_hash.clone());
        write_json(&args.out.join("manifest.json"), &manifest)?;
        println!("{}", report.result_hash);
        if report.expected.is_some() && !report.matches {
            bail!("replayed result {} differs from the recorded {:?}", report.result_hash, report.expected);
        }
        return Ok(());
    }
    let image_path = args.image.as_deref().ok_or_else(|| invalid("--image is required without --manifest"))?;
    let ckpt = args.checkpoint.as_deref().ok_or_else(|| invalid("--checkpoint is required without --manifest"))?;
    let image = load_image(image_path)?;
    let source = DenoiserSource::Toy { checkpoint: absolute(ckpt)? };
    let denoiser = source.load(Path::new("."))?;
    let (motion, depth) = match (&args.spec, &args.camera, &args.depth) {
        (Some(spec), None, _) => (MotionInput::Spec { spec: MotionSpecDocument::from_json(&read_text(spec)?)? }, None),
        (None, Some(cam), Some(depth)) => {
            let (doc, map) = load_camera(cam, depth)?;
            let depth_ref = ArtifactRef { path: Some(absolute(depth)?), sha256: depth_hash(&map) };
            (MotionInput::Camera { path: doc, depth: depth_ref }, Some(map))
        }
        _ => return Err(invalid("give either --spec or --camera with --depth")),
    };
    let sampler = args.clocks.config(denoiser.schedule().steps, seed.unwrap_or(0));
    sampler.validate(denoiser.schedule().steps)?;
    let out = generate(
        Generation {
            denoiser: denoiser.as_ref(),
            denoiser_source: source,
            image: &image,
            image_path: Some(absolute(image_path)?),
            motion,
            depth: depth.as_ref(),
            sampler,
            text: args.text,
        },
        &mut NoObserver,
    )?;
    save_video(&args.out.join("video.ttmv"), &out.video)?;
    write_frames(&args.out, "frame", &out.video)?;
    save_video(&args.out.join("reference.ttmv"), &out.reference.frames)?;
    write_json(&args.out.join("manifest.json"), &out.manifest)?;
    println!("{}", out.manifest.result_hash.unwrap_or_default());
    Ok(())
}

fn load_toy(path: &Path) -> Result<(ToyModel, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok((ToyModel::from_bytes(&bytes)?, hash_bytes(&bytes)))
}

fn cmd_ablate(args: AblateArgs, seed: u64) -> Result<()> {
    let (model, ckpt_hash) = load_toy(&args.checkpoint)?;
    let provider = FlowRegistry::default().get(&args.flow)?;
    let exp = ToyExperiment { eval_scenes: args.scenes, data_seed: args.data_seed, ..ToyExperiment::default() };
    let eval = EvalConfig { alpha: args.alpha, ..EvalConfig::default() };
    let scenes = generate_scenes(&exp.world, args.scenes, held_out_seed(args.data_seed))?;
    let table = evaluate_ablation(&model, &scenes, (args.t_weak, args.t_strong), seed, &eval, provider.as_ref())?;
    println!("{}", table.render());
    if let Some(out) = &args.out {
        let doc = json!({
            "command": "ablate",
            "seed": seed,
            "checkpoint": ArtifactRef { path: Some(args.checkpoint.display().to_string()), sha256: ckpt_hash },
            "denoiser_hash": model.fingerprint(),
            "scenes": args.scenes,
            "data_seed": args.data_seed,
            "clocks": [args.t_weak, args.t_strong],
            "flow": args.flow,
            "alpha": args.alpha,
            "rows": table.rows,
        });
        write_json(out, &doc)?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: u64) -> Result<()> {
    let exp = ToyExperiment {
        train_scenes: args.scenes,
        data_seed: args.data_seed,
        arch: ToyArch { hidden: args.hidden, blocks: args.blocks },
        train: TrainConfig { seed, steps: args.steps, batch_size: args.batch, lr: args.lr, ..TrainConfig::default() },
        ..ToyExperiment::default()
    };
    let mut model = match &args.resume {
        Some(p) => load_toy(p)?.0,
        None => ToyModel::new(exp.arch, NoiseSchedule::default(), seed),
    };
    if model.arch != exp.arch {
        return Err(invalid(format!("checkpoint architecture {:?} differs from the flags {:?}", model.arch, exp.arch)));
    }
    let scenes = generate_scenes(&exp.world, exp.train_scenes, exp.data_seed)?;
    let clips = training_clips(&scenes);
    let start = std::time::Instant::now();
    let every = (exp.train.steps / 20).max(1);
    let report = train(&mut model, &clips, &exp.train, |step, loss| {
        if step % every == 0 {
            log::info!("step {step} loss {loss:.5} ({:.0}s)", start.elapsed().as_secs_f64());
        }
    })?;
    model.save(&args.out)?;
    let manifest = json!({
        "command": "train-toy",
        "seed": seed,
        "experiment": exp,
        "steps_done": report.steps_done,
        "final_loss": report.losses.last(),
        "denoiser_hash": model.fingerprint(),
        "seconds": start.elapsed().as_secs_f64(),
    });
    let side = args.out.with_extension("json");
    write_json(&side, &manifest)?;
    println!("{}", model.fingerprint());
    Ok(())
}

#[derive(Serialize)]
struct ObjectMotionReport {
    clips: usize,
    ctd: f64,
    bg_obj_ctd: f64,
    dynamic_degree: f64,
    dynamic_score: f64,
    track_failures: usize,
}

fn cmd_eval(args: EvalArgs, seed: u64) -> Result<()> {
    let provider = FlowRegistry::default().get(&args.flow)?;
    let report = if let Some(dir) = &args.dataset {
        let ckpt = args.checkpoint.as_deref().ok_or_else(|| invalid("--dataset needs --checkpoint"))?;
        let (model, ckpt_hash) = load_toy(ckpt)?;
        let (_, scenes) = read_dataset(dir)?;
        let eval = EvalConfig { alpha: args.alpha, ..EvalConfig::default() };
        let sampler = args.clocks.config(model.schedule().steps, seed);
        sampler.validate(model.schedule().steps)?;
        let clips = scenes
            .iter()
            .map(|scene| {
                let source = SourceImage::new(scene.render().index_axis(Axis(0), 0).to_owned())?;
                let reference = build_warped_reference(&source, &scene.to_motion_spec())?;
                let initial = reference.mask.index_axis(Axis(0), 0).to_owned();
                let mask = GuidanceMask::new(reference.mask.clone());
                let video = ttm_core::sampler::sample(
                    &model,
                    &reference.frames,
                    &mask,
                    &sampler,
                    &source,
                    None,
                    &mut NoObserver,
                )?;
                evaluate_clip(&video, &initial, &scene.centroid_trajectory(0), provider.as_ref(), &eval)
            })
            .collect::<std::result::Result<Vec<_>, TtmError>>()?;
        let setting = ttm_core::sampler::AblationSetting {
            start: ttm_core::sampler::ClockLabel::Weak,
            stop: ttm_core::sampler::ClockLabel::Strong,
            regime: Regime::DualClock,
        };
        let row = AblationRow::aggregate(setting, sampler.t_weak, sampler.t_strong, &clips)?;
        let summary = ObjectMotionReport {
            clips: row.clips,
            ctd: row.ctd,
            bg_obj_ctd: row.bg_obj_ctd,
            dynamic_degree: row.dynamic_degree,
            dynamic_score: row.dynamic_score,
            track_failures: row.track_failures,
        };
        json!({
            "command": "eval",
            "protocol": "object_motion",
            "seed": seed,
            "sampler": sampler,
            "checkpoint": ArtifactRef { path: Some(ckpt.display().to_string()), sha256: ckpt_hash },
            "flow": args.flow,
            "alpha": args.alpha,
            "metrics": summary,
        })
    } else if let (Some(video), Some(reference)) = (&args.video, &args.reference) {
        let v = load_video(video)?;
        let r = load_video(reference)?;
        let m = camera_metrics(&v, &r, provider.as_ref())?;
        json!({
            "command": "eval",
            "protocol": "camera",
            "seed": seed,
            "flow": args.flow,
            "metrics": m,
        })
    } else {
        return Err(invalid("give --dataset with --checkpoint, or --video with --reference"));
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, text)?;
    }
    Ok(())
}
