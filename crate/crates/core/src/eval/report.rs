//! Per-clip evaluation and the ablation metrics table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{bg_obj_ctd, centroid_tracker, ctd, dynamic_degree, FlowProvider, Point, TrackerConfig, DEFAULT_ALPHA};
use crate::error::{Result, TtmError};
use crate::sampler::{AblationSetting, Regime};
use crate::tensor::{Mask, Video};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub alpha: f64,
    pub tracker: TrackerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, tracker: TrackerConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    /// Trajectory distance; the frame diagonal when the track failed.
    pub ctd: f64,
    pub track_failed: bool,
    pub bg_obj_ctd: Option<f64>,
    pub dynamic: bool,
    pub dynamic_score: f64,
}

pub fn evaluate_clip(
    video: &Video,
    initial_mask: &Mask,
    target: &[Point],
    provider: &dyn FlowProvider,
    cfg: &EvalConfig,
) -> Result<ClipMetrics> {
    let (_, _, h, w) = video.dim();
    let track = centroid_tracker(video, initial_mask, &cfg.tracker)?;
    let (ctd_value, failed) = match ctd(&track, target) {
        Ok(v) => (v, false),
        Err(TtmError::TrackLost { .. }) => ((h as f64).hypot(w as f64), true),
        Err(e) => return Err(e),
    };
    let bg = match bg_obj_ctd(&track) {
        Ok(v) => Some(v),
        Err(TtmError::TrackLost { .. }) => None,
        Err(e) => return Err(e),
    };
    let dd = dynamic_degree(video, provider, cfg.alpha)?;
    Ok(ClipMetrics { ctd: ctd_value, track_failed: failed, bg_obj_ctd: bg, dynamic: dd.dynamic, dynamic_score: dd.score })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub setting: AblationSetting,
    pub t1: usize,
    pub t2: usize,
    pub clips: usize,
    pub ctd: f64,
    pub bg_obj_ctd: f64,
    /// Fraction of clips classified dynamic.
    pub dynamic_degree: f64,
    /// Mean fraction of dynamic frames per clip.
    pub dynamic_score: f64,
    pub track_failures: usize,
}

impl AblationRow {
    pub fn aggregate(setting: AblationSetting, t1: usize, t2: usize, clips: &[ClipMetrics]) -> Result<Self> {
        if clips.is_empty() {
            return Err(TtmError::invalid("no clips to aggregate"));
        }
        let n = clips.len() as f64;
        let bg: Vec<f64> = clips.iter().filter_map(|c| c.bg_obj_ctd).collect();
        Ok(Self {
            label: setting.label(),
            setting,
            t1,
            t2,
            clips: clips.len(),
            ctd: clips.iter().map(|c| c.ctd).sum::<f64>() / n,
            bg_obj_ctd: if bg.is_empty() { f64::NAN } else { bg.iter().sum::<f64>() / bg.len() as f64 },
            dynamic_degree: clips.iter().filter(|c| c.dynamic).count() as f64 / n,
            dynamic_score: clips.iter().map(|c| c.dynamic_score).sum::<f64>() / n,
            track_failures: clips.iter().filter(|c| c.track_failed).count(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// First row with the given regime and clock labels.
    pub fn find(&self, regime: Regime, t1: usize, t2: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting.regime == regime && r.t1 == t1 && r.t2 == t2)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tables always serialize")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:>4} {:>4} {:<17} {:>8} {:>11} {:>8} {:>8} {:>6}",
            "(t1, t2)", "t1", "t2", "regime", "CTD", "BG-Obj CTD", "dynamic", "dyn.frm", "lost"
        );
        for r in &self.rows {
            let regime = serde_json::to_value(r.setting.regime).ok().and_then(|v| v.as_str().map(String::from));
            let _ = writeln!(
                out,
                "{:<22} {:>4} {:>4} {:<17} {:>8.3} {:>11.3} {:>8.3} {:>8.3} {:>6}",
                r.label,
                r.t1,
                r.t2,
                regime.unwrap_or_default(),
                r.ctd,
                r.bg_obj_ctd,
                r.dynamic_degree,
                r.dynamic_score,
                r.track_failures
            );
        }
        out
    }
}
