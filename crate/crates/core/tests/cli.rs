use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use ndarray::{Array2, Array3};
use serde_json::{json, Value};
use tower::ServiceExt;

use ttm_core::depth::{write_pfm, CameraPath, CameraPathDocument, CameraPose, Intrinsics};
use ttm_core::diffusion::toy::{ToyArch, ToyModel};
use ttm_core::diffusion::NoiseSchedule;
use ttm_core::io::{frame_pngs, load_video};
use ttm_core::motion::{build_warped_reference, Keyframe, MotionSpec, MotionSpecDocument};
use ttm_core::sampler::SamplerConfig;
use ttm_core::service::{Job, JobStatus, Service, ServiceConfig};
use ttm_core::tensor::{repeat_frames, to_rgb8, SourceImage};

const SIDE: usize = 16;

fn ttm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttm")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap().trim().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn test_image() -> SourceImage {
    SourceImage::new(Array3::from_shape_fn((3, SIDE, SIDE), |(c, y, x)| {
        ((x * 11 + y * 5 + c * 70) % 256) as f32 / 255.0
    }))
    .unwrap()
}

fn write_image(dir: &Path) -> PathBuf {
    let path = dir.join("source.png");
    to_rgb8(test_image().view()).save(&path).unwrap();
    path
}

fn square_mask() -> Array2<bool> {
    Array2::from_shape_fn((SIDE, SIDE), |(y, x)| (4..9).contains(&y) && (6..11).contains(&x))
}

fn shift_spec() -> MotionSpecDocument {
    let spec = MotionSpec::single(square_mask(), vec![Keyframe::at(0), Keyframe::translate(3, 2.0, 1.0)], 4);
    MotionSpecDocument::from_spec(&spec, None)
}

fn write_spec(dir: &Path, name: &str, doc: &MotionSpecDocument) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, doc.to_json()).unwrap();
    path
}

fn write_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("toy.ckpt");
    ToyModel::new(ToyArch::default(), NoiseSchedule::default(), 4).save(&path).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn warp_of_identity_spec_copies_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_image(dir.path());
    let doc = MotionSpecDocument::from_spec(&MotionSpec::identity(square_mask(), 3), None);
    let spec = write_spec(dir.path(), "identity.json", &doc);
    let out = dir.path().join("warp");
    let hash = ok(&ttm(&["warp", "--image", p(&image), "--spec", p(&spec), "--out", p(&out), "--seed", "4"]));
    let expected = repeat_frames(&test_image(), 3);
    assert_eq!(load_video(&out.join("reference.ttmv")).unwrap(), expected);
    let source_png = std::fs::read(&image).unwrap();
    for i in 0..3 {
        assert_eq!(std::fs::read(out.join(format!("frame_{i:04}.png"))).unwrap(), source_png);
    }
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["content_hash"], hash);
    assert_eq!(manifest["seed"], 4);
}

#[test]
fn invalid_inputs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_image(dir.path());
    let wrong = MotionSpecDocument::from_spec(&MotionSpec::identity(Array2::from_elem((4, 4), true), 3), None);
    let spec = write_spec(dir.path(), "wrong.json", &wrong);
    let out = ttm(&["warp", "--image", p(&image), "--spec", p(&spec), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");
    assert!(err["message"].as_str().unwrap().contains("mask is 4x4"));

    let missing = ttm(&["warp", "--image", "/nonexistent.png", "--spec", p(&spec), "--out", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(2));
    let garbage = dir.path().join("garbage.png");
    std::fs::write(&garbage, b"nope").unwrap();
    let undecodable = ttm(&["warp", "--image", p(&garbage), "--spec", p(&spec), "--out", "/tmp/x"]);
    assert_eq!(undecodable.status.code(), Some(2));
    assert_eq!(ttm(&["warp", "--bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_image(dir.path());
    let spec = write_spec(dir.path(), "spec.json", &shift_spec());
    let ckpt = dir.path().join("corrupt.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = ttm(&[
        "generate", "--image", p(&image), "--spec", p(&spec), "--checkpoint", p(&ckpt), "--t-weak", "4",
        "--t-strong", "2", "--out", p(&dir.path().join("g")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn camera_warp_with_identity_poses_copies_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_image(dir.path());
    let depth = dir.path().join("depth.pfm");
    write_pfm(&depth, &Array2::from_elem((SIDE, SIDE), 2.0f32)).unwrap();
    let intrinsics = Intrinsics { fx: 20.0, fy: 20.0, cx: 7.5, cy: 7.5 };
    let path = CameraPath::new(vec![CameraPose::IDENTITY; 3], 1.0).unwrap();
    let doc = CameraPathDocument::from_path(&path, intrinsics, Default::default());
    let path_file = dir.path().join("path.json");
    std::fs::write(&path_file, doc.to_json()).unwrap();
    let out = dir.path().join("cam");
    ok(&ttm(&["camera-warp", "--image", p(&image), "--depth", p(&depth), "--path", p(&path_file), "--out", p(&out)]));
    assert_eq!(load_video(&out.join("reference.ttmv")).unwrap(), repeat_frames(&test_image(), 3));
    assert!(read_json(&out.join("manifest.json"))["depth"]["sha256"].is_string());
}

#[test]
fn generate_is_deterministic_and_replays_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_image(dir.path());
    let spec = write_spec(dir.path(), "spec.json", &shift_spec());
    let ckpt = write_checkpoint(dir.path());
    let run = |out: &Path, seed: &str| {
        ok(&ttm(&[
            "generate", "--image", p(&image), "--spec", p(&spec), "--checkpoint", p(&ckpt), "--t-weak", "6",
            "--t-strong", "3", "--seed", seed, "--out", p(out),
        ]))
    };
    let a = run(&dir.path().join("a"), "7");
    let b = run(&dir.path().join("b"), "7");
    let c = run(&dir.path().join("c"), "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let manifest = dir.path().join("a").join("manifest.json");
    let m = read_json(&manifest);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["result_hash"], a);
    let replay_a = ok(&ttm(&["generate", "--manifest", p(&manifest), "--seed", "7", "--out", p(&dir.path().join("r1"))]));
    let replay_b = ok(&ttm(&["generate", "--manifest", p(&manifest), "--seed", "7", "--out", p(&dir.path().join("r2"))]));
    assert_eq!((replay_a.as_str(), replay_b.as_str()), (a.as_str(), a.as_str()));
}

#[test]
fn tampered_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_image(dir.path());
    let spec = write_spec(dir.path(), "spec.json", &shift_spec());
    let ckpt = write_checkpoint(dir.path());
    let out = dir.path().join("a");
    ok(&ttm(&[
        "generate", "--image", p(&image), "--spec", p(&spec), "--checkpoint", p(&ckpt), "--t-weak", "4",
        "--t-strong", "2", "--out", p(&out),
    ]));
    let mut m = read_json(&out.join("manifest.json"));
    m["result_hash"] = json!("0".repeat(64));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, m.to_string()).unwrap();
    let replayed = ttm(&["generate", "--manifest", p(&bad), "--out", p(&dir.path().join("r"))]);
    assert_eq!(replayed.status.code(), Some(3));
    m["image"]["sha256"] = json!("f".repeat(64));
    std::fs::write(&bad, m.to_string()).unwrap();
    let replayed = ttm(&["generate", "--manifest", p(&bad), "--out", p(&dir.path().join("r"))]);
    assert_eq!(replayed.status.code(), Some(2));
}

async fn body_of(resp: axum::response::Response) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let status = resp.status();
    let headers = resp.headers().clone();
    (status, headers, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cli_and_service_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_image(dir.path());
    let doc = shift_spec();
    let spec = write_spec(dir.path(), "spec.json", &doc);
    let ckpt = write_checkpoint(dir.path());

    let warp_out = dir.path().join("warp");
    let cli_warp_hash = ok(&ttm(&["warp", "--image", p(&image), "--spec", p(&spec), "--out", p(&warp_out)]));
    let cli_gen_hash = ok(&ttm(&[
        "generate", "--image", p(&image), "--spec", p(&spec), "--checkpoint", p(&ckpt), "--t-weak", "6",
        "--t-strong", "3", "--seed", "21", "--out", p(&dir.path().join("gen")),
    ]));

    let cfg = ServiceConfig { storage_root: dir.path().join("store"), checkpoint: Some(ckpt.clone()), ..Default::default() };
    let mut service = Service::open(cfg).unwrap();
    let _workers = service.start_workers();
    let app = service.router();
    let send = |req: Request<Body>| app.clone().oneshot(req);
    let (_, _, body) = body_of(send(Request::post("/projects").body(Body::from(std::fs::read(&image).unwrap())).unwrap()).await.unwrap()).await;
    let project: Value = serde_json::from_slice(&body).unwrap();
    let id = project["id"].as_str().unwrap();

    let (status, headers, _) = body_of(
        send(Request::post(format!("/projects/{id}/preview-warp")).body(Body::from(doc.to_json())).unwrap()).await.unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["x-content-hash"].to_str().unwrap(), cli_warp_hash);
    let local = build_warped_reference(&test_image(), &doc.to_spec().unwrap()).unwrap();
    for (i, png) in frame_pngs(&local.frames).iter().enumerate() {
        assert_eq!(&std::fs::read(warp_out.join(format!("frame_{i:04}.png"))).unwrap(), png);
    }

    let job_req = json!({
        "motion": { "kind": "spec", "spec": doc },
        "sampler": SamplerConfig::dual_clock(6, 3, 21),
    });
    let (status, _, body) = body_of(
        send(Request::post(format!("/projects/{id}/jobs")).body(Body::from(job_req.to_string())).unwrap()).await.unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let mut job: Job = serde_json::from_slice(&body).unwrap();
    for _ in 0..2000 {
        if matches!(job.status, JobStatus::Done | JobStatus::Failed) {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(5)).await;
        let (_, _, body) = body_of(send(Request::get(format!("/jobs/{}", job.id)).body(Body::empty()).unwrap()).await.unwrap()).await;
        job = serde_json::from_slice(&body).unwrap();
    }
    assert_eq!(job.status, JobStatus::Done, "{:?}", job.error);
    let manifest = job.manifest.unwrap();
    assert_eq!(manifest.result_hash.as_deref(), Some(cli_gen_hash.as_str()));

    let mpath = dir.path().join("service_manifest.json");
    std::fs::write(&mpath, manifest.to_json()).unwrap();
    let replayed = ok(&ttm(&["generate", "--manifest", p(&mpath), "--seed", "21", "--out", p(&dir.path().join("rp"))]));
    assert_eq!(replayed, cli_gen_hash);
}

#[test]
fn gen_dataset_is_seeded_and_records_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&ttm(&["gen-dataset", "--out", p(out), "--scenes", "3", "--frames", "4", "--height", "32", "--width", "32", "--seed", "5"]));
    }
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 3);
    for name in ["scene.json", "flow.bin", "frame_0003.png", "mask_0000.png"] {
        assert_eq!(
            std::fs::read(a.join("scene_00001").join(name)).unwrap(),
            std::fs::read(b.join("scene_00001").join(name)).unwrap()
        );
    }
}

#[test]
fn train_then_ablate_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("toy.ckpt");
    ok(&ttm(&["train-toy", "--out", p(&ckpt), "--scenes", "6", "--steps", "4", "--batch", "1", "--seed", "3"]));
    let train_manifest = read_json(&ckpt.with_extension("json"));
    assert_eq!(train_manifest["seed"], 3);
    assert_eq!(train_manifest["steps_done"], 4);
    assert_eq!(ToyModel::load(&ckpt).unwrap().losses().len(), 4);

    let table = dir.path().join("ablation.json");
    let printed = ok(&ttm(&["ablate", "--checkpoint", p(&ckpt), "--scenes", "1", "--out", p(&table), "--seed", "2"]));
    let doc = read_json(&table);
    assert_eq!(doc["seed"], 2);
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().any(|r| r["setting"]["regime"] == "dual_clock" && r["t1"] == 36 && r["t2"] == 25));
    assert!(printed.contains("dual_clock"));

    let data = dir.path().join("data");
    ok(&ttm(&["gen-dataset", "--out", p(&data), "--scenes", "2", "--seed", "9"]));
    let report = dir.path().join("eval.json");
    ok(&ttm(&["eval", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--t-weak", "8", "--t-strong", "4", "--out", p(&report), "--seed", "1"]));
    let r = read_json(&report);
    assert_eq!(r["metrics"]["clips"], 2);
    assert_eq!(r["seed"], 1);
    assert!(r["metrics"]["ctd"].as_f64().unwrap().is_finite());
}

#[test]
fn eval_camera_metrics_of_identical_videos() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_image(dir.path());
    let spec = write_spec(dir.path(), "spec.json", &shift_spec());
    let out = dir.path().join("warp");
    ok(&ttm(&["warp", "--image", p(&image), "--spec", p(&spec), "--out", p(&out)]));
    let v = out.join("reference.ttmv");
    let text = ok(&ttm(&["eval", "--video", p(&v), "--reference", p(&v)]));
    let r: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(r["metrics"]["mse"], 0.0);
    assert_eq!(r["metrics"]["flow_mse"], 0.0);
    assert!((r["metrics"]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}
