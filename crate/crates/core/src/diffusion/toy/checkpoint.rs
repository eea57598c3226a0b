//! Checkpoint container: magic, little-endian header length, JSON header,
//! then raw little-endian `f32` parameters (and Adam moments when present).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::TrainState;
use super::{AdamState, ConvNet, ConvSpec, ToyArch, ToyModel};
use crate::diffusion::NoiseSchedule;
use crate::error::{Result, TtmError};

const MAGIC: &[u8; 8] = b"TTMCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: String,
    pub arch: ToyArch,
    pub layers: Vec<ConvSpec>,
    pub param_count: usize,
    pub schedule: NoiseSchedule,
    pub train_state: Option<TrainState>,
    pub optimizer_step: Option<u64>,
}

fn put(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(super) fn encode(model: &ToyModel) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: "toy-spacetime-conv".into(),
        arch: model.arch,
        layers: model.net.specs.clone(),
        param_count: model.net.param_count(),
        schedule: model.schedule.clone(),
        train_state: model.train_state.clone(),
        optimizer_step: model.optimizer.as_ref().map(|o| o.step),
    };
    let json = serde_json::to_vec(&header).expect("headers always serialize");
    let mut buf = Vec::with_capacity(16 + json.len() + model.net.param_count() * 12);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    put(&mut buf, &model.net.params);
    if let Some(opt) = &model.optimizer {
        put(&mut buf, &opt.m);
        put(&mut buf, &opt.v);
    }
    buf
}

fn take(bytes: &[u8], at: &mut usize, n: usize) -> Result<Vec<f32>> {
    let end = *at + n * 4;
    let chunk = bytes.get(*at..end).ok_or_else(|| TtmError::Checkpoint("truncated parameter block".into()))?;
    *at = end;
    Ok(chunk.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub(super) fn decode(bytes: &[u8]) -> Result<ToyModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(TtmError::Checkpoint("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| TtmError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| TtmError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(TtmError::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    if header.layers != header.arch.specs() {
        return Err(TtmError::Checkpoint("layer table does not match the architecture".into()));
    }
    header.schedule.check_invariants()?;
    let mut at = 16 + len;
    let mut net = ConvNet::<f32>::zeros(header.layers.clone());
    if net.param_count() != header.param_count {
        return Err(TtmError::Checkpoint("parameter count mismatch".into()));
    }
    net.params = take(bytes, &mut at, header.param_count)?;
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let m = take(bytes, &mut at, header.param_count)?;
            let v = take(bytes, &mut at, header.param_count)?;
            Some(AdamState { m, v, step })
        }
        None => None,
    };
    if at != bytes.len() {
        return Err(TtmError::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(ToyModel { arch: header.arch, net, schedule: header.schedule, train_state: header.train_state, optimizer })
}

/// Hash of everything that affects predictions (not training metadata).
pub(super) fn weights_hash(model: &ToyModel) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.net.specs).unwrap());
    h.update(model.schedule.content_hash());
    for v in &model.net.params {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
