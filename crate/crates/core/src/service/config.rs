use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtmError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartPolicy {
    /// Jobs found running at startup go back to the queue.
    #[default]
    Requeue,
    /// Jobs found running at startup are marked failed.
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub storage_root: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub workers: usize,
    pub queue_capacity: usize,
    pub restart_policy: RestartPolicy,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            storage_root: PathBuf::from("ttm-data"),
            checkpoint: None,
            workers: 1,
            queue_capacity: 64,
            restart_policy: RestartPolicy::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TtmError::Validation(vec![format!("config: {e}")]))
    }

    /// Reads the optional config file, then applies `TTM_PORT`,
    /// `TTM_STORAGE_ROOT` and `TTM_CHECKPOINT` from `env`.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if let Some(port) = env("TTM_PORT") {
            cfg.port = port.parse().map_err(|_| TtmError::invalid(format!("TTM_PORT is not a port: {port:?}")))?;
        }
        if let Some(root) = env("TTM_STORAGE_ROOT") {
            cfg.storage_root = PathBuf::from(root);
        }
        if let Some(ckpt) = env("TTM_CHECKPOINT") {
            cfg.checkpoint = Some(PathBuf::from(ckpt));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.workers == 0 {
            errs.push("workers must be at least 1".to_string());
        }
        if self.queue_capacity == 0 {
            errs.push("queue_capacity must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TtmError::Validation(errs))
        }
    }
}
