//! Content-addressed blob directory plus a redb metadata index.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use redb::{Database, ReadableTable, TableDefinition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ServiceError;
use crate::depth::CameraPathDocument;
use crate::motion::MotionSpecDocument;
use crate::pipeline::RunManifest;
use crate::sampler::SamplerConfig;

const PROJECTS: TableDefinition<&str, &[u8]> = TableDefinition::new("projects");
const JOBS: TableDefinition<&str, &[u8]> = TableDefinition::new("jobs");
const REQUESTS: TableDefinition<&str, &[u8]> = TableDefinition::new("requests");

type StoreResult<T> = std::result::Result<T, ServiceError>;

pub fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn new_id(prefix: &str) -> String {
    format!("{prefix}_{:032x}", rand::random::<u128>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecVersion {
    pub version: u32,
    pub spec: MotionSpecDocument,
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    /// sha256 of the uploaded image bytes in the blob store.
    pub image_blob: String,
    /// Pixel content hash, as recorded in run manifests.
    pub image_hash: String,
    pub height: usize,
    pub width: usize,
    pub specs: Vec<SpecVersion>,
    pub camera_paths: Vec<CameraPathDocument>,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn can_become(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!((self, next), (Queued, Running) | (Running, Done) | (Running, Failed) | (Queued, Failed))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub total: usize,
}

/// Depth supplied inline with a camera-path job, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthUpload {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobMotion {
    Spec { spec: MotionSpecDocument },
    Camera { path: CameraPathDocument, depth: DepthUpload },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub motion: JobMotion,
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub project_id: String,
    pub status: JobStatus,
    pub progress: Progress,
    /// Inputs resolved at submit time; run with the recorded manifest on done.
    pub manifest: Option<RunManifest>,
    pub pending: Option<super::worker::PendingRun>,
    pub result_blob: Option<String>,
    pub error: Option<String>,
    pub created_at: u64,
    pub updated_at: u64,
}

/// A response recorded under a client request key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub request_hash: String,
    pub status: u16,
    pub content_type: String,
    pub headers: Vec<(String, String)>,
    pub body_blob: String,
}

pub struct Store {
    db: Database,
    blobs: PathBuf,
}

fn storage(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(e.to_string())
}

fn decode<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> StoreResult<T> {
    serde_json::from_slice(bytes).map_err(storage)
}

fn encode<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("records always serialize")
}

impl Store {
    pub fn open(root: &Path) -> StoreResult<Self> {
        let blobs = root.join("blobs");
        std::fs::create_dir_all(&blobs).map_err(storage)?;
        let db = Database::create(root.join("index.redb")).map_err(storage)?;
        let tx = db.begin_write().map_err(storage)?;
        for def in [PROJECTS, JOBS, REQUESTS] {
            tx.open_table(def).map_err(storage)?;
        }
        tx.commit().map_err(storage)?;
        Ok(Self { db, blobs })
    }

    pub fn blob_path(&self, hash: &str) -> PathBuf {
        self.blobs.join(&hash[..2]).join(hash)
    }

    /// Stores bytes under their sha256; writing existing content is a no-op.
    pub fn put_blob(&self, bytes: &[u8]) -> StoreResult<String> {
        let hash = hex::encode(Sha256::digest(bytes));
        let path = self.blob_path(&hash);
        if path.exists() {
            return Ok(hash);
        }
        let dir = path.parent().expect("blob paths have a parent");
        std::fs::create_dir_all(dir).map_err(storage)?;
        let tmp = dir.join(format!(".{hash}.{:016x}", rand::random::<u64>()));
        std::fs::write(&tmp, bytes).map_err(storage)?;
        std::fs::rename(&tmp, &path).map_err(storage)?;
        Ok(hash)
    }

    pub fn get_blob(&self, hash: &str) -> StoreResult<Vec<u8>> {
        if hash.len() < 3 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ServiceError::NotFound(format!("blob {hash}")));
        }
        std::fs::read(self.blob_path(hash)).map_err(|_| ServiceError::NotFound(format!("blob {hash}")))
    }

    fn get<T: for<'de> Deserialize<'de>>(&self, def: TableDefinition<&str, &[u8]>, key: &str) -> StoreResult<Option<T>> {
        let tx = self.db.begin_read().map_err(storage)?;
        let table = tx.open_table(def).map_err(storage)?;
        let row = table.get(key).map_err(storage)?;
        row.map(|v| decode(v.value())).transpose()
    }

    fn put<T: Serialize>(&self, def: TableDefinition<&str, &[u8]>, key: &str, value: &T) -> StoreResult<()> {
        let tx = self.db.begin_write().map_err(storage)?;
        {
            let mut table = tx.open_table(def).map_err(storage)?;
            table.insert(key, encode(value).as_slice()).map_err(storage)?;
        }
        tx.commit().map_err(storage)
    }

    /// Read-modify-write inside one write transaction.
    fn update<T, F>(&self, def: TableDefinition<&str, &[u8]>, key: &str, f: F) -> StoreResult<T>
    where
        T: Serialize + for<'de> Deserialize<'de>,
        F: FnOnce(&mut T) -> StoreResult<()>,
    {
        let tx = self.db.begin_write().map_err(storage)?;
        let value = {
            let mut table = tx.open_table(def).map_err(storage)?;
            let current = table.get(key).map_err(storage)?.map(|v| decode::<T>(v.value()));
            let mut value = current.ok_or_else(|| ServiceError::NotFound(key.to_string()))??;
            f(&mut value)?;
            table.insert(key, encode(&value).as_slice()).map_err(storage)?;
            value
        };
        tx.commit().map_err(storage)?;
        Ok(value)
    }

    pub fn insert_project(&self, project: &Project) -> StoreResult<()> {
        self.put(PROJECTS, &project.id, project)
    }

    pub fn project(&self, id: &str) -> StoreResult<Project> {
        self.get(PROJECTS, id)?.ok_or_else(|| ServiceError::NotFound(format!("project {id}")))
    }

    pub fn update_project(&self, id: &str, f: impl FnOnce(&mut Project) -> StoreResult<()>) -> StoreResult<Project> {
        self.update(PROJECTS, id, |p: &mut Project| {
            f(p)?;
            p.updated_at = now_secs();
            Ok(())
        })
    }

    pub fn insert_job(&self, job: &Job) -> StoreResult<()> {
        self.put(JOBS, &job.id, job)
    }

    pub fn job(&self, id: &str) -> StoreResult<Job> {
        self.get(JOBS, id)?.ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    /// Applies `f`, rejecting any status change outside
    /// queued -> running -> {done, failed}.
    pub fn update_job(&self, id: &str, f: impl FnOnce(&mut Job) -> StoreResult<()>) -> StoreResult<Job> {
        self.update(JOBS, id, |job: &mut Job| {
            let before = job.status;
            let progress = job.progress;
            f(job)?;
            if job.status != before && !before.can_become(job.status) {
                return Err(ServiceError::Conflict(format!(
                    "job {} cannot go from {before:?} to {:?}",
                    job.id, job.status
                )));
            }
            if job.progress.step < progress.step {
                job.progress = progress;
            }
            job.updated_at = now_secs();
            Ok(())
        })
    }

    pub fn jobs(&self) -> StoreResult<Vec<Job>> {
        let tx = self.db.begin_read().map_err(storage)?;
        let table = tx.open_table(JOBS).map_err(storage)?;
        let mut out = Vec::new();
        for row in table.iter().map_err(storage)? {
            let (_, v) = row.map_err(storage)?;
            out.push(decode(v.value())?);
        }
        Ok(out)
    }

    /// Running jobs left over from a previous process go back to queued or
    /// to failed. Returns every job that is queued afterwards, oldest first.
    pub fn recover(&self, requeue: bool) -> StoreResult<Vec<String>> {
        let tx = self.db.begin_write().map_err(storage)?;
        let mut queued = Vec::new();
        {
            let mut table = tx.open_table(JOBS).map_err(storage)?;
            let mut rows = Vec::new();
            for row in table.iter().map_err(storage)? {
                let (k, v) = row.map_err(storage)?;
                rows.push((k.value().to_string(), decode::<Job>(v.value())?));
            }
            for (key, mut job) in rows {
                if job.status == JobStatus::Running {
                    if requeue {
                        job.status = JobStatus::Queued;
                        job.progress = Progress { step: 0, total: job.progress.total };
                    } else {
                        job.status = JobStatus::Failed;
                        job.error = Some("interrupted by a service restart".into());
                    }
                    job.updated_at = now_secs();
                    table.insert(key.as_str(), encode(&job).as_slice()).map_err(storage)?;
                }
                if job.status == JobStatus::Queued {
                    queued.push((job.created_at, key));
                }
            }
        }
        tx.commit().map_err(storage)?;
        queued.sort();
        Ok(queued.into_iter().map(|(_, k)| k).collect())
    }

    pub fn stored_response(&self, key: &str) -> StoreResult<Option<StoredResponse>> {
        self.get(REQUESTS, key)
    }

    /// Records a response unless one already exists; returns the winner.
    pub fn record_response(&self, key: &str, resp: &StoredResponse) -> StoreResult<StoredResponse> {
        let tx = self.db.begin_write().map_err(storage)?;
        let winner = {
            let mut table = tx.open_table(REQUESTS).map_err(storage)?;
            let existing = table.get(key).map_err(storage)?.map(|v| decode::<StoredResponse>(v.value()));
            match existing {
                Some(r) => r?,
                None => {
                    table.insert(key, encode(resp).as_slice()).map_err(storage)?;
                    resp.clone()
                }
            }
        };
        tx.commit().map_err(storage)?;
        Ok(winner)
    }
}
