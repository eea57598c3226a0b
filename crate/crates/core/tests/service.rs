use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ndarray::{Array2, Array3};
use serde_json::{json, Value};
use tower::ServiceExt;

use ttm_core::diffusion::toy::{ToyArch, ToyModel};
use ttm_core::diffusion::NoiseSchedule;
use ttm_core::io::{decode_video, frame_pngs, mask_pngs};
use ttm_core::motion::{build_warped_reference, Keyframe, MotionSpec, MotionSpecDocument};
use ttm_core::pipeline::{replay, RunManifest};
use ttm_core::sampler::SamplerConfig;
use ttm_core::service::{
    Job, JobStatus, PendingRun, Progress, RestartPolicy, Service, ServiceConfig, Store, IDEMPOTENCY_HEADER,
};
use ttm_core::tensor::{repeat_frames, to_rgb8, SourceImage};

const SIDE: usize = 16;

fn test_image() -> SourceImage {
    SourceImage::new(Array3::from_shape_fn((3, SIDE, SIDE), |(c, y, x)| {
        ((x * 13 + y * 7 + c * 50) % 256) as f32 / 255.0
    }))
    .unwrap()
}

fn png_bytes(img: &SourceImage) -> Vec<u8> {
    let mut out = Vec::new();
    to_rgb8(img.view()).write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

fn square_mask() -> Array2<bool> {
    Array2::from_shape_fn((SIDE, SIDE), |(y, x)| (5..10).contains(&y) && (5..10).contains(&x))
}

fn shift_spec(frames: usize) -> MotionSpecDocument {
    let spec = MotionSpec::single(square_mask(), vec![Keyframe::at(0), Keyframe::translate(frames - 1, 3.0, 0.0)], frames);
    MotionSpecDocument::from_spec(&spec, None)
}

fn config(root: &Path, checkpoint: Option<&Path>) -> ServiceConfig {
    ServiceConfig {
        storage_root: root.to_path_buf(),
        checkpoint: checkpoint.map(Path::to_path_buf),
        ..ServiceConfig::default()
    }
}

fn write_checkpoint(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("toy.ckpt");
    ToyModel::new(ToyArch::default(), NoiseSchedule::default(), 3).save(&path).unwrap();
    path
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn post(uri: &str, body: Vec<u8>, key: Option<&str>) -> Request<Body> {
    let mut b = Request::post(uri);
    if let Some(k) = key {
        b = b.header(IDEMPOTENCY_HEADER, k);
    }
    b.body(Body::from(body)).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

async fn create_project(app: &Router) -> Value {
    let (status, _, body) = call(app, post("/projects", png_bytes(&test_image()), None)).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

/// Splits a `multipart/mixed` body into `(filename, bytes)` parts.
fn parse_multipart(content_type: &str, body: &[u8]) -> Vec<(String, Vec<u8>)> {
    let boundary = content_type.split("boundary=").nth(1).unwrap();
    let delim = format!("--{boundary}");
    let mut parts = Vec::new();
    let mut rest = body;
    loop {
        let start = find(rest, delim.as_bytes()).unwrap() + delim.len();
        rest = &rest[start..];
        if rest.starts_with(b"--") {
            break;
        }
        let header_end = find(rest, b"\r\n\r\n").unwrap();
        let headers = String::from_utf8_lossy(&rest[..header_end]).to_string();
        let name = headers.split("filename=\"").nth(1).unwrap().split('"').next().unwrap().to_string();
        let content = &rest[header_end + 4..];
        let end = find(content, format!("\r\n{delim}").as_bytes()).unwrap();
        parts.push((name, content[..end].to_vec()));
        rest = &content[end + 2..];
    }
    parts
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

#[tokio::test]
async fn healthz_reports_ok() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let (status, _, body) = call(&app, get("/healthz")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["status"], "ok");
}

#[tokio::test]
async fn project_creation_echoes_size_and_ids_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let a = create_project(&app).await;
    let b = create_project(&app).await;
    assert_eq!((a["height"].as_u64(), a["width"].as_u64()), (Some(SIDE as u64), Some(SIDE as u64)));
    assert_ne!(a["id"], b["id"]);
    let (status, _, body) = call(&app, get(&format!("/projects/{}", a["id"].as_str().unwrap()))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), a);
}

#[tokio::test]
async fn uploaded_image_is_stored_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let service = Service::open(config(dir.path(), None)).unwrap();
    let app = service.router();
    let project = create_project(&app).await;
    let blob = service.state.store.get_blob(project["image_blob"].as_str().unwrap()).unwrap();
    assert_eq!(blob, png_bytes(&test_image()));
    assert_eq!(SourceImage::decode(&blob).unwrap().content_hash(), project["image_hash"].as_str().unwrap());
}

#[tokio::test]
async fn corrupt_upload_is_rejected_and_nothing_is_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let (status, _, body) = call(&app, post("/projects", b"not an image".to_vec(), None)).await;
    assert!(status.is_client_error());
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["error"], "validation");
    let blobs: Vec<_> = walk(&dir.path().join("blobs"));
    assert!(blobs.is_empty(), "{blobs:?}");
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    assert_eq!(call(&app, get("/projects/prj_nope")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, get("/jobs/job_nope")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, get("/jobs/job_nope/result")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn preview_of_identity_spec_is_copies_of_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    let doc = MotionSpecDocument::from_spec(&MotionSpec::identity(square_mask(), 4), None);
    let (status, headers, body) =
        call(&app, post(&format!("/projects/{id}/preview-warp"), doc.to_json().into_bytes(), None)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let parts = parse_multipart(headers["content-type"].to_str().unwrap(), &body);
    let raw = &parts.iter().find(|(n, _)| n == "reference.ttmv").unwrap().1;
    assert_eq!(decode_video(raw).unwrap(), repeat_frames(&test_image(), 4));
    let frames: Vec<_> = parts.iter().filter(|(n, _)| n.starts_with("frame_")).collect();
    assert_eq!(frames.len(), 4);
    let source_png = frame_pngs(&repeat_frames(&test_image(), 1)).remove(0);
    assert!(frames.iter().all(|(_, b)| *b == source_png));
}

#[tokio::test]
async fn preview_matches_the_library_path_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    let doc = shift_spec(5);
    let (status, headers, body) =
        call(&app, post(&format!("/projects/{id}/preview-warp"), doc.to_json().into_bytes(), None)).await;
    assert_eq!(status, StatusCode::OK);
    let local = build_warped_reference(&test_image(), &doc.to_spec().unwrap()).unwrap();
    assert_eq!(headers["x-content-hash"].to_str().unwrap(), local.content_hash());
    let parts = parse_multipart(headers["content-type"].to_str().unwrap(), &body);
    let served_frames: Vec<Vec<u8>> =
        parts.iter().filter(|(n, _)| n.starts_with("frame_")).map(|(_, b)| b.clone()).collect();
    let served_masks: Vec<Vec<u8>> =
        parts.iter().filter(|(n, _)| n.starts_with("mask_")).map(|(_, b)| b.clone()).collect();
    assert_eq!(served_frames, frame_pngs(&local.frames));
    assert_eq!(served_masks, mask_pngs(&local.mask));
}

#[tokio::test]
async fn preview_rejects_specs_for_other_image_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    let wrong = Array2::from_elem((SIDE + 4, SIDE), true);
    let doc = MotionSpecDocument::from_spec(&MotionSpec::identity(wrong, 3), None);
    let (status, _, body) =
        call(&app, post(&format!("/projects/{id}/preview-warp"), doc.to_json().into_bytes(), None)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"], "validation");
    assert!(v["violations"].as_array().unwrap().iter().any(|m| m.as_str().unwrap().contains("mask is")));
}

#[tokio::test]
async fn specs_are_kept_as_a_versioned_history() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    for doc in [shift_spec(4), shift_spec(4), shift_spec(6)] {
        let (status, _, _) =
            call(&app, post(&format!("/projects/{id}/preview-warp"), doc.to_json().into_bytes(), None)).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, _, body) = call(&app, get(&format!("/projects/{id}"))).await;
    let project: Value = serde_json::from_slice(&body).unwrap();
    let specs = project["specs"].as_array().unwrap();
    assert_eq!(specs.len(), 2);
    assert_eq!(specs[1]["version"], 2);
    let stored: MotionSpecDocument = serde_json::from_value(specs[1]["spec"].clone()).unwrap();
    assert_eq!(stored, shift_spec(6));
}

#[tokio::test]
async fn request_keys_make_posts_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let body = png_bytes(&test_image());
    let (s1, _, b1) = call(&app, post("/projects", body.clone(), Some("k1"))).await;
    let (s2, _, b2) = call(&app, post("/projects", body.clone(), Some("k1"))).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(b1, b2);
    let (s3, _, b3) = call(&app, post("/projects", body, Some("k2"))).await;
    assert_eq!(s3, StatusCode::CREATED);
    assert_ne!(b1, b3);
    let other = png_bytes(&SourceImage::new(Array3::zeros((3, SIDE, SIDE))).unwrap());
    let (s4, _, _) = call(&app, post("/projects", other, Some("k1"))).await;
    assert_eq!(s4, StatusCode::CONFLICT);
}

fn job_body(frames: usize, sampler: SamplerConfig) -> Vec<u8> {
    serde_json::to_vec(&json!({
        "motion": { "kind": "spec", "spec": shift_spec(frames) },
        "sampler": sampler,
    }))
    .unwrap()
}

#[tokio::test]
async fn missing_checkpoint_fails_the_job_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    let (status, _, body) =
        call(&app, post(&format!("/projects/{id}/jobs"), job_body(4, SamplerConfig::dual_clock(6, 3, 1)), None)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job: Job = serde_json::from_slice(&body).unwrap();
    assert_eq!(job.status, JobStatus::Failed);
    assert!(job.error.unwrap().contains("checkpoint"));
}

#[tokio::test]
async fn invalid_sampler_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path());
    let app = Service::open(config(&dir.path().join("store"), Some(&ckpt))).unwrap().router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    let bad = SamplerConfig::dual_clock(3, 6, 1);
    let (status, _, body) = call(&app, post(&format!("/projects/{id}/jobs"), job_body(4, bad), None)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{}", String::from_utf8_lossy(&body));
}

#[tokio::test]
async fn result_before_completion_is_not_ready() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path());
    let service = Service::open(config(&dir.path().join("store"), Some(&ckpt))).unwrap();
    let app = service.router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    let (_, _, body) =
        call(&app, post(&format!("/projects/{id}/jobs"), job_body(4, SamplerConfig::dual_clock(6, 3, 1)), None)).await;
    let job: Job = serde_json::from_slice(&body).unwrap();
    assert_eq!(job.status, JobStatus::Queued);
    let (status, _, body) = call(&app, get(&format!("/jobs/{}/result", job.id))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["error"], "not_ready");
}

async fn wait_done(app: &Router, job_id: &str) -> (Job, Vec<usize>) {
    let mut steps = Vec::new();
    for _ in 0..2000 {
        let (_, _, body) = call(app, get(&format!("/jobs/{job_id}"))).await;
        let job: Job = serde_json::from_slice(&body).unwrap();
        steps.push(job.progress.step);
        if matches!(job.status, JobStatus::Done | JobStatus::Failed) {
            return (job, steps);
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("job {job_id} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn jobs_run_to_completion_and_replay_to_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path());
    let mut service = Service::open(config(&dir.path().join("store"), Some(&ckpt))).unwrap();
    let _workers = service.start_workers();
    let app = service.router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    let sampler = SamplerConfig::dual_clock(8, 4, 5);
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let (status, _, body) = call(&app, post(&format!("/projects/{id}/jobs"), job_body(4, sampler), None)).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        let job: Job = serde_json::from_slice(&body).unwrap();
        let (done, steps) = wait_done(&app, &job.id).await;
        assert_eq!(done.status, JobStatus::Done, "{:?}", done.error);
        assert!(steps.windows(2).all(|w| w[0] <= w[1]), "{steps:?}");
        assert_eq!(done.progress, Progress { step: 8, total: 8 });
        let manifest = done.manifest.clone().unwrap();
        assert_eq!(manifest.seed, 5);
        let (status, headers, bytes) = call(&app, get(&format!("/jobs/{}/result", job.id))).await;
        assert_eq!(status, StatusCode::OK);
        let video = decode_video(&bytes).unwrap();
        assert_eq!(video.dim(), (4, 3, SIDE, SIDE));
        let served = headers["x-content-hash"].to_str().unwrap().to_string();
        assert_eq!(Some(&served), manifest.result_hash.as_ref());
        let (replayed, report) = replay(&RunManifest::from_json(&manifest.to_json()).unwrap(), Path::new("/")).unwrap();
        assert!(report.matches);
        assert_eq!(replayed, video);
        hashes.push(served);
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn keyed_job_submission_runs_once() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path());
    let mut service = Service::open(config(&dir.path().join("store"), Some(&ckpt))).unwrap();
    let _workers = service.start_workers();
    let app = service.router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    let body = job_body(3, SamplerConfig::dual_clock(4, 2, 9));
    let (_, _, a) = call(&app, post(&format!("/projects/{id}/jobs"), body.clone(), Some("job-1"))).await;
    let (_, _, b) = call(&app, post(&format!("/projects/{id}/jobs"), body, Some("job-1"))).await;
    let (ja, jb): (Job, Job) = (serde_json::from_slice(&a).unwrap(), serde_json::from_slice(&b).unwrap());
    assert_eq!(ja.id, jb.id);
    assert_eq!(wait_done(&app, &ja.id).await.0.status, JobStatus::Done);
    assert_eq!(service.state.store.jobs().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn broken_inputs_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path());
    let mut service = Service::open(config(&dir.path().join("store"), Some(&ckpt))).unwrap();
    let app = service.router();
    let id = create_project(&app).await["id"].as_str().unwrap().to_string();
    let (_, _, body) =
        call(&app, post(&format!("/projects/{id}/jobs"), job_body(3, SamplerConfig::dual_clock(4, 2, 9)), None)).await;
    let job: Job = serde_json::from_slice(&body).unwrap();
    std::fs::remove_file(&ckpt).unwrap();
    let _workers = service.start_workers();
    let (done, _) = wait_done(&app, &job.id).await;
    assert_eq!(done.status, JobStatus::Failed);
    assert!(done.error.unwrap().contains("toy.ckpt"));
}

fn stale_job(store: &Store, status: JobStatus) -> String {
    let job = Job {
        id: format!("job_{status:?}"),
        project_id: "prj_x".into(),
        status,
        progress: Progress { step: 2, total: 4 },
        manifest: None,
        pending: Some(PendingRun {
            image_path: "/nonexistent.png".into(),
            motion: ttm_core::pipeline::MotionInput::Spec { spec: shift_spec(3) },
            denoiser: ttm_core::pipeline::DenoiserSource::Toy { checkpoint: "/nonexistent.ckpt".into() },
            sampler: SamplerConfig::dual_clock(4, 2, 0),
            text: None,
        }),
        result_blob: None,
        error: None,
        created_at: 1,
        updated_at: 1,
    };
    store.insert_job(&job).unwrap();
    job.id
}

#[test]
fn running_jobs_are_requeued_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let service = Service::open(config(dir.path(), None)).unwrap();
        stale_job(&service.state.store, JobStatus::Running)
    };
    let service = Service::open(config(dir.path(), None)).unwrap();
    let job = service.state.store.job(&id).unwrap();
    assert_eq!(job.status, JobStatus::Queued);
    assert_eq!(job.progress.step, 0);
}

#[test]
fn running_jobs_can_be_failed_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let service = Service::open(config(dir.path(), None)).unwrap();
        stale_job(&service.state.store, JobStatus::Running)
    };
    let cfg = ServiceConfig { restart_policy: RestartPolicy::Fail, ..config(dir.path(), None) };
    let service = Service::open(cfg).unwrap();
    let job = service.state.store.job(&id).unwrap();
    assert_eq!(job.status, JobStatus::Failed);
    assert!(job.error.unwrap().contains("restart"));
}

#[test]
fn job_status_only_moves_forward() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let id = stale_job(&store, JobStatus::Queued);
    let back = |s: JobStatus| store.update_job(&id, |j| {
        j.status = s;
        Ok(())
    });
    assert!(back(JobStatus::Done).is_err());
    assert!(back(JobStatus::Running).is_ok());
    assert!(back(JobStatus::Queued).is_err());
    assert!(back(JobStatus::Done).is_ok());
    assert!(back(JobStatus::Failed).is_err());
    assert_eq!(store.job(&id).unwrap().status, JobStatus::Done);
}

#[tokio::test]
async fn projects_survive_a_restart_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (id, before) = {
        let app = Service::open(config(dir.path(), None)).unwrap().router();
        let id = create_project(&app).await["id"].as_str().unwrap().to_string();
        let doc = shift_spec(4);
        call(&app, post(&format!("/projects/{id}/preview-warp"), doc.to_json().into_bytes(), None)).await;
        let (_, _, body) = call(&app, get(&format!("/projects/{id}"))).await;
        (id, body)
    };
    let app = Service::open(config(dir.path(), None)).unwrap().router();
    let (_, _, after) = call(&app, get(&format!("/projects/{id}"))).await;
    assert_eq!(before, after);
}
