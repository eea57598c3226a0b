use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Mutex};

use super::store::{JobStatus, Progress, Store};
use super::ServiceError;
use crate::io::encode_video;
use crate::pipeline::{generate, load_depth, DenoiserSource, Generation, MotionInput};
use crate::sampler::{SamplerConfig, StepRecord};
use crate::tensor::SourceImage;

/// Inputs of a queued job, resolved to blob paths at submit time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingRun {
    pub image_path: String,
    pub motion: MotionInput,
    pub denoiser: DenoiserSource,
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Spawns `count` workers draining the shared queue. Each job runs on the
/// blocking pool; one job at a time per worker.
pub fn spawn_workers(store: Arc<Store>, rx: mpsc::Receiver<String>, count: usize) -> Vec<tokio::task::JoinHandle<()>> {
    let rx = Arc::new(Mutex::new(rx));
    (0..count)
        .map(|_| {
            let (store, rx) = (store.clone(), rx.clone());
            tokio::spawn(async move {
                loop {
                    let Some(id) = rx.lock().await.recv().await else { break };
                    let store2 = store.clone();
                    let id2 = id.clone();
                    let joined = tokio::task::spawn_blocking(move || run_job(&store2, &id2)).await;
                    let failure = match joined {
                        Ok(Ok(())) => None,
                        Ok(Err(e)) => Some(e.to_string()),
                        Err(e) => Some(format!("worker task failed: {e}")),
                    };
                    if let Some(msg) = failure {
                        log::warn!("job {id}: {msg}");
                        mark_failed(&store, &id, msg);
                    }
                }
            })
        })
        .collect()
}

fn mark_failed(store: &Store, id: &str, msg: String) {
    let res = store.update_job(id, |job| {
        if matches!(job.status, JobStatus::Queued | JobStatus::Running) {
            job.status = JobStatus::Failed;
            job.error = Some(msg);
        }
        Ok(())
    });
    if let Err(e) = res {
        log::error!("job {id}: could not record failure: {e}");
    }
}

/// Runs one queued job to completion. Panics inside generation become a
/// failed status with the panic message.
pub fn run_job(store: &Store, id: &str) -> Result<(), ServiceError> {
    let job = store.job(id)?;
    if job.status != JobStatus::Queued {
        return Ok(());
    }
    let pending = job.pending.clone().ok_or_else(|| ServiceError::Internal(format!("job {id} has no inputs")))?;
    let total = pending.sampler.t_weak;
    store.update_job(id, |j| {
        j.status = JobStatus::Running;
        j.progress = Progress { step: 0, total };
        Ok(())
    })?;
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| execute(store, id, &pending)));
    match outcome {
        Ok(Ok((manifest, bytes))) => {
            let blob = store.put_blob(&bytes)?;
            store.update_job(id, |j| {
                j.status = JobStatus::Done;
                j.progress = Progress { step: total, total };
                j.manifest = Some(manifest);
                j.result_blob = Some(blob);
                Ok(())
            })?;
            Ok(())
        }
        Ok(Err(e)) => Err(e),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            Err(ServiceError::Internal(format!("worker crashed: {msg}")))
        }
    }
}

fn execute(store: &Store, id: &str, run: &PendingRun) -> Result<(crate::pipeline::RunManifest, Vec<u8>), ServiceError> {
    let image = SourceImage::load(&run.image_path)?;
    let denoiser = run.denoiser.load(Path::new("/"))?;
    let depth = load_depth(&run.motion, Path::new("/"))?;
    let t_weak = run.sampler.t_weak;
    let mut progress = |rec: &StepRecord<'_>| {
        let step = t_weak + 1 - rec.t;
        if let Err(e) = store.update_job(id, |j| {
            j.progress.step = step;
            Ok(())
        }) {
            log::warn!("job {id}: progress update failed: {e}");
        }
    };
    let out = generate(
        Generation {
            denoiser: denoiser.as_ref(),
            denoiser_source: run.denoiser.clone(),
            image: &image,
            image_path: Some(run.image_path.clone()),
            motion: run.motion.clone(),
            depth: depth.as_ref(),
            sampler: run.sampler,
            text: run.text.clone(),
        },
        &mut progress,
    )?;
    Ok((out.manifest, encode_video(&out.video)))
}
