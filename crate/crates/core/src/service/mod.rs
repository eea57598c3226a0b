//! HTTP project and job service over the shared generation pipeline.

mod config;
mod store;
mod worker;

pub use config::{RestartPolicy, ServiceConfig};
pub use store::{
    DepthUpload, Job, JobMotion, JobRequest, JobStatus, Progress, Project, SpecVersion, Store, StoredResponse,
};
pub use worker::{run_job, spawn_workers, PendingRun};

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::mpsc;

use crate::depth::write_pfm;
use crate::error::TtmError;
use crate::io::{encode_video, frame_pngs, frame_name, mask_pngs};
use crate::motion::{build_warped_reference, MotionSpecDocument, WarpedReference};
use crate::pipeline::{build_reference, depth_hash, ArtifactRef, DenoiserSource, MotionInput};
use crate::tensor::SourceImage;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const CONTENT_HASH_HEADER: &str = "x-content-hash";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("job {id} is {status:?}, result not ready")]
    NotReady { id: String, status: JobStatus },
    #[error("job queue is full")]
    QueueFull,
    #[error("storage: {0}")]
    Storage(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl From<TtmError> for ServiceError {
    fn from(e: TtmError) -> Self {
        match e {
            TtmError::Validation(v) => ServiceError::Validation(v),
            e if e.is_validation() => ServiceError::Validation(vec![e.to_string()]),
            TtmError::Image(e) => ServiceError::Validation(vec![format!("undecodable image: {e}")]),
            e => ServiceError::Internal(e.to_string()),
        }
    }
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) | ServiceError::NotReady { .. } => StatusCode::CONFLICT,
            ServiceError::QueueFull => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Storage(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn body(&self) -> serde_json::Value {
        match self {
            ServiceError::Validation(v) => json!({ "error": "validation", "violations": v }),
            ServiceError::NotFound(what) => json!({ "error": "not_found", "message": what }),
            ServiceError::Conflict(m) => json!({ "error": "conflict", "message": m }),
            ServiceError::NotReady { id, status } => json!({ "error": "not_ready", "job": id, "status": status }),
            ServiceError::QueueFull => json!({ "error": "queue_full" }),
            e => json!({ "error": "internal", "message": e.to_string() }),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ServiceError>;

pub struct AppState {
    pub config: ServiceConfig,
    pub store: Arc<Store>,
    queue: mpsc::Sender<String>,
    keyed: tokio::sync::Mutex<()>,
}

/// An opened service: state plus the queue receiver until workers start.
pub struct Service {
    pub state: Arc<AppState>,
    receiver: Option<mpsc::Receiver<String>>,
    recovered: Vec<String>,
}

impl Service {
    /// Opens the store and applies the restart policy to leftover jobs.
    pub fn open(config: ServiceConfig) -> ApiResult<Self> {
        config.validate()?;
        let store = Arc::new(Store::open(&config.storage_root)?);
        let recovered = store.recover(config.restart_policy == RestartPolicy::Requeue)?;
        let capacity = config.queue_capacity.max(recovered.len());
        let (tx, rx) = mpsc::channel(capacity);
        let state = Arc::new(AppState { config, store, queue: tx, keyed: tokio::sync::Mutex::new(()) });
        Ok(Self { state, receiver: Some(rx), recovered })
    }

    pub fn router(&self) -> Router {
        router(self.state.clone())
    }

    /// Starts the worker pool and enqueues jobs recovered at startup.
    pub fn start_workers(&mut self) -> Vec<tokio::task::JoinHandle<()>> {
        let Some(rx) = self.receiver.take() else { return Vec::new() };
        for id in self.recovered.drain(..) {
            if self.state.queue.try_send(id.clone()).is_err() {
                log::error!("could not requeue job {id}");
            }
        }
        spawn_workers(self.state.store.clone(), rx, self.state.config.workers)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/projects", post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/preview-warp", post(preview_warp))
        .route("/projects/{id}/jobs", post(submit_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/result", get(job_result))
        .with_state(state)
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> ApiResult<()> {
    let addr = format!("{}:{}", config.bind, config.port);
    let mut service = Service::open(config)?;
    let _workers = service.start_workers();
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| ServiceError::Internal(e.to_string()))?;
    log::info!("listening on {addr}");
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}

/// A fully materialized response, so it can be replayed byte for byte.
struct Reply {
    status: StatusCode,
    content_type: String,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl Reply {
    fn json(status: StatusCode, value: &impl serde::Serialize) -> Self {
        Self {
            status,
            content_type: "application/json".into(),
            headers: Vec::new(),
            body: serde_json::to_vec(value).expect("responses always serialize"),
        }
    }

    fn into_response(self) -> Response {
        let mut resp = (self.status, self.body).into_response();
        let h = resp.headers_mut();
        if let Ok(v) = HeaderValue::from_str(&self.content_type) {
            h.insert(header::CONTENT_TYPE, v);
        }
        for (k, v) in self.headers {
            if let (Ok(k), Ok(v)) = (HeaderName::try_from(k), HeaderValue::from_str(&v)) {
                h.insert(k, v);
            }
        }
        resp
    }
}

/// Runs `f` at most once per client request key. A retry with the same key
/// and body gets the recorded response; a different body is a conflict.
async fn idempotent<F, Fut>(state: &AppState, headers: &HeaderMap, scope: &str, body: &[u8], f: F) -> Response
where
    F: FnOnce() -> Fut,
    Fut: Future<Output = ApiResult<Reply>>,
{
    let Some(key) = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_owned) else {
        return f().await.map_or_else(IntoResponse::into_response, Reply::into_response);
    };
    let _guard = state.keyed.lock().await;
    let slot = format!("{scope}|{key}");
    let request_hash = hex::encode(Sha256::digest(body));
    let result = async {
        if let Some(stored) = state.store.stored_response(&slot)? {
            return replay(state, stored, &request_hash);
        }
        let reply = f().await?;
        let stored = StoredResponse {
            request_hash: request_hash.clone(),
            status: reply.status.as_u16(),
            content_type: reply.content_type.clone(),
            headers: reply.headers.clone(),
            body_blob: state.store.put_blob(&reply.body)?,
        };
        state.store.record_response(&slot, &stored)?;
        Ok(reply)
    }
    .await;
    result.map_or_else(IntoResponse::into_response, Reply::into_response)
}

fn replay(state: &AppState, stored: StoredResponse, request_hash: &str) -> ApiResult<Reply> {
    if stored.request_hash != request_hash {
        return Err(ServiceError::Conflict("idempotency key was used with a different request body".into()));
    }
    Ok(Reply {
        status: StatusCode::from_u16(stored.status).map_err(|e| ServiceError::Storage(e.to_string()))?,
        content_type: stored.content_type,
        headers: stored.headers,
        body: state.store.get_blob(&stored.body_blob)?,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Validation(vec![format!("malformed JSON body: {e}")]))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_project(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    idempotent(&state, &headers, "POST /projects", &body, || async {
        let image = SourceImage::decode(&body)?;
        let blob = state.store.put_blob(&body)?;
        let now = store::now_secs();
        let project = Project {
            id: store::new_id("prj"),
            image_blob: blob,
            image_hash: image.content_hash(),
            height: image.height(),
            width: image.width(),
            specs: Vec::new(),
            camera_paths: Vec::new(),
            created_at: now,
            updated_at: now,
        };
        state.store.insert_project(&project)?;
        Ok(Reply::json(StatusCode::CREATED, &project))
    })
    .await
}

async fn get_project(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Project>> {
    Ok(Json(state.store.project(&id)?))
}

fn project_image(state: &AppState, project: &Project) -> ApiResult<(SourceImage, PathBuf)> {
    let path = state.store.blob_path(&project.image_blob);
    Ok((SourceImage::load(&path)?, path))
}

/// Appends `spec` to the project history unless it equals the latest version.
fn remember_spec(state: &AppState, project_id: &str, spec: &MotionSpecDocument) -> ApiResult<()> {
    state.store.update_project(project_id, |p| {
        if p.specs.last().map(|v| &v.spec) != Some(spec) {
            let version = p.specs.last().map_or(1, |v| v.version + 1);
            p.specs.push(SpecVersion { version, spec: spec.clone(), created_at: store::now_secs() });
        }
        Ok(())
    })?;
    Ok(())
}

/// Multipart body of a warped reference: frame PNGs, mask PNGs, the lossless
/// tensor and a JSON summary. The boundary derives from the content hash so
/// equal references give equal bytes.
pub fn preview_multipart(reference: &WarpedReference) -> (String, Vec<u8>) {
    let hash = reference.content_hash();
    let boundary = format!("ttm-{}", &hash[..32.min(hash.len())]);
    let mut body = Vec::new();
    let mut part = |name: &str, ctype: &str, bytes: &[u8]| {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        body.extend_from_slice(format!("Content-Type: {ctype}\r\n").as_bytes());
        body.extend_from_slice(format!("Content-Disposition: attachment; filename=\"{name}\"\r\n\r\n").as_bytes());
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    };
    let (frames, height, width) = {
        let d = reference.frames.dim();
        (d.0, d.2, d.3)
    };
    let meta = json!({
        "content_hash": hash,
        "frame_count": frames,
        "height": height,
        "width": width,
        "warnings": reference.warnings,
    });
    part("reference.json", "application/json", meta.to_string().as_bytes());
    for (i, png) in frame_pngs(&reference.frames).iter().enumerate() {
        part(&frame_name("frame", i), "image/png", png);
    }
    for (i, png) in mask_pngs(&reference.mask).iter().enumerate() {
        part(&frame_name("mask", i), "image/png", png);
    }
    part("reference.ttmv", "application/octet-stream", &encode_video(&reference.frames));
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/mixed; boundary={boundary}"), body)
}

async fn preview_warp(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let scope = format!("POST /projects/{id}/preview-warp");
    idempotent(&state, &headers, &scope, &body, || async {
        let project = state.store.project(&id)?;
        let doc: MotionSpecDocument = parse_json(&body)?;
        let (image, _) = project_image(&state, &project)?;
        let spec = doc.to_spec()?;
        spec.validate(image.height(), image.width())?;
        let reference = build_warped_reference(&image, &spec)?;
        remember_spec(&state, &id, &doc)?;
        let (content_type, body) = preview_multipart(&reference);
        Ok(Reply {
            status: StatusCode::OK,
            content_type,
            headers: vec![(CONTENT_HASH_HEADER.into(), reference.content_hash())],
            body,
        })
    })
    .await
}

fn denoiser_source(state: &AppState) -> std::result::Result<DenoiserSource, String> {
    let path = state.config.checkpoint.as_ref().ok_or("no denoiser checkpoint configured")?;
    let path = std::path::absolute(path).map_err(|e| format!("checkpoint path {}: {e}", path.display()))?;
    if !path.is_file() {
        return Err(format!("checkpoint {} does not exist", path.display()));
    }
    Ok(DenoiserSource::Toy { checkpoint: path.to_string_lossy().into_owned() })
}

fn resolve_motion(state: &AppState, project: &Project, motion: &JobMotion) -> ApiResult<MotionInput> {
    match motion {
        JobMotion::Spec { spec } => {
            spec.to_spec()?.validate(project.height, project.width)?;
            Ok(MotionInput::Spec { spec: spec.clone() })
        }
        JobMotion::Camera { path, depth } => {
            path.to_path()?;
            if (depth.height, depth.width) != (project.height, project.width) {
                return Err(ServiceError::Validation(vec![format!(
                    "depth is {}x{}, image is {}x{}",
                    depth.height, depth.width, project.height, project.width
                )]));
            }
            let values = ndarray::Array2::from_shape_vec((depth.height, depth.width), depth.values.clone())
                .map_err(|e| ServiceError::Validation(vec![format!("depth values: {e}")]))?;
            let map = crate::depth::DepthMap::new(values.clone(), path.intrinsics, path.axis)?;
            let tmp = tempfile_in(&state.config.storage_root)?;
            write_pfm(&tmp, &values)?;
            let bytes = std::fs::read(&tmp).map_err(|e| ServiceError::Storage(e.to_string()))?;
            let _ = std::fs::remove_file(&tmp);
            let blob = state.store.put_blob(&bytes)?;
            Ok(MotionInput::Camera {
                path: path.clone(),
                depth: ArtifactRef {
                    path: Some(state.store.blob_path(&blob).to_string_lossy().into_owned()),
                    sha256: depth_hash(&map),
                },
            })
        }
    }
}

fn tempfile_in(root: &std::path::Path) -> ApiResult<PathBuf> {
    let dir = root.join("tmp");
    std::fs::create_dir_all(&dir).map_err(|e| ServiceError::Storage(e.to_string()))?;
    Ok(dir.join(format!("{:016x}.pfm", rand::random::<u64>())))
}

async fn submit_job(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let scope = format!("POST /projects/{id}/jobs");
    idempotent(&state, &headers, &scope, &body, || async {
        let project = state.store.project(&id)?;
        let req: JobRequest = parse_json(&body)?;
        let motion = resolve_motion(&state, &project, &req.motion)?;
        let (image, image_path) = project_image(&state, &project)?;
        let now = store::now_secs();
        let mut job = Job {
            id: store::new_id("job"),
            project_id: id.clone(),
            status: JobStatus::Queued,
            progress: Progress { step: 0, total: req.sampler.t_weak },
            manifest: None,
            pending: None,
            result_blob: None,
            error: None,
            created_at: now,
            updated_at: now,
        };
        let source = match denoiser_source(&state) {
            Ok(s) => s,
            Err(reason) => {
                job.status = JobStatus::Failed;
                job.error = Some(reason);
                state.store.insert_job(&job)?;
                return Ok(Reply::json(StatusCode::ACCEPTED, &job));
            }
        };
        let denoiser = match source.load(std::path::Path::new("/")) {
            Ok(d) => d,
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(format!("cannot load denoiser: {e}"));
                state.store.insert_job(&job)?;
                return Ok(Reply::json(StatusCode::ACCEPTED, &job));
            }
        };
        req.sampler.validate(denoiser.schedule().steps)?;
        let depth = crate::pipeline::load_depth(&motion, std::path::Path::new("/"))?;
        build_reference(&image, &motion, depth.as_ref())?;
        match &req.motion {
            JobMotion::Spec { spec } => remember_spec(&state, &id, spec)?,
            JobMotion::Camera { path, .. } => {
                state.store.update_project(&id, |p| {
                    if p.camera_paths.last() != Some(path) {
                        p.camera_paths.push(path.clone());
                    }
                    Ok(())
                })?;
            }
        }
        let permit = state.queue.try_reserve().map_err(|e| match e {
            mpsc::error::TrySendError::Full(()) => ServiceError::QueueFull,
            mpsc::error::TrySendError::Closed(()) => ServiceError::Internal("job queue is closed".into()),
        })?;
        job.pending = Some(PendingRun {
            image_path: image_path.to_string_lossy().into_owned(),
            motion,
            denoiser: source,
            sampler: req.sampler,
            text: req.text,
        });
        state.store.insert_job(&job)?;
        permit.send(job.id.clone());
        Ok(Reply::json(StatusCode::ACCEPTED, &job))
    })
    .await
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    Ok(Json(state.store.job(&id)?))
}

async fn job_result(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.store.job(&id)?;
    let (Some(blob), Some(manifest)) = (job.result_blob.as_ref(), job.manifest.as_ref()) else {
        return Err(ServiceError::NotReady { id, status: job.status });
    };
    let bytes = state.store.get_blob(blob)?;
    let hash = manifest.result_hash.clone().unwrap_or_default();
    Ok((
        StatusCode::OK,
        [(header::CONTENT_TYPE, "application/octet-stream".to_string()), (HeaderName::from_static(CONTENT_HASH_HEADER), hash)],
        bytes,
    )
        .into_response())
}
