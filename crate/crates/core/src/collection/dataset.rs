//! Dataset files: 8-byte magic, a u64 little-endian manifest length, a JSON
//! manifest, then a flat little-endian float payload.
//!
//! Transition records are `(state, action, next_state, done)` as 32-bit floats.
//! Expert trajectories store their states as 64-bit floats so that a replay from
//! the recorded start pose can be compared against them exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ReplayBuffer, Transition};
use crate::diffcore::Array;
use crate::envs::Pose;
use crate::error::{Error, Result};
use crate::expertgen::ExpertTrajectory;

pub const DATASET_MAGIC: &[u8; 8] = b"RFRLDS01";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Transitions(ReplayBuffer),
    Trajectories(Vec<ExpertTrajectory>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    kind: String,
    env_id: String,
    state_shape: Vec<usize>,
    action_dim: usize,
    count: usize,
    dtype: String,
    payload_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trajectories: Option<Vec<TrajMeta>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajMeta {
    episode: usize,
    len: usize,
    dt: f64,
    start: Pose,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let manifest = match data {
        Dataset::Transitions(buf) => {
            for t in buf.iter() {
                for v in t.state.data().iter().chain(t.action.data()).chain(t.next_state.data()) {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                payload.extend_from_slice(&(if t.done { 1.0f32 } else { 0.0 }).to_le_bytes());
            }
            Manifest {
                version: DATASET_VERSION,
                kind: "transitions".into(),
                env_id: buf.env_id().to_string(),
                state_shape: buf.state_shape().to_vec(),
                action_dim: buf.action_dim(),
                count: buf.len(),
                dtype: "f32-le".into(),
                payload_sha256: String::new(),
                capacity: Some(buf.capacity()),
                trajectories: None,
            }
        }
        Dataset::Trajectories(trajs) => {
            let first = trajs
                .first()
                .ok_or_else(|| Error::Data("no trajectories to save".into()))?;
            let shape = first.state_shape().to_vec();
            let mut meta = Vec::with_capacity(trajs.len());
            for t in trajs {
                if t.state_shape() != shape.as_slice() || t.env_id != first.env_id {
                    return Err(Error::shape("trajectories differ in environment or state shape"));
                }
                for s in &t.states {
                    for v in s.data() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
                meta.push(TrajMeta {
                    episode: t.episode,
                    len: t.len(),
                    dt: t.dt,
                    start: t.start,
                });
            }
            Manifest {
                version: DATASET_VERSION,
                kind: "trajectories".into(),
                env_id: first.env_id.clone(),
                state_shape: shape,
                action_dim: 0,
                count: trajs.len(),
                dtype: "f64-le".into(),
                payload_sha256: String::new(),
                capacity: None,
                trajectories: Some(meta),
            }
        }
    };
    let manifest = Manifest {
        payload_sha256: sha256_hex(&payload),
        ..manifest
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not a dataset file", path.display())));
    }
    if bytes.len() < 16 {
        return Err(Error::Corruption("dataset header is truncated".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < mlen {
        return Err(Error::Corruption("dataset manifest is truncated".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", manifest.version)));
    }
    let payload = &body[mlen..];
    let state_len: usize = manifest.state_shape.iter().product();
    match manifest.kind.as_str() {
        "transitions" => {
            if manifest.dtype != "f32-le" {
                return Err(Error::Format(format!("unexpected dtype {}", manifest.dtype)));
            }
            let rec = 2 * state_len + manifest.action_dim + 1;
            check_payload(payload, manifest.count * rec * 4, &manifest.payload_sha256)?;
            let vals: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let cap = manifest.capacity.unwrap_or(manifest.count).max(manifest.count).max(1);
            let mut buf = ReplayBuffer::new(&manifest.env_id, &manifest.state_shape, manifest.action_dim, cap)?;
            for r in vals.chunks_exact(rec) {
                let (s, rest) = r.split_at(state_len);
                let (a, rest) = rest.split_at(manifest.action_dim);
                let (n, d) = rest.split_at(state_len);
                buf.push(Transition {
                    state: Array::from_f32(manifest.state_shape.clone(), s)?,
                    action: Array::from_f32(vec![manifest.action_dim], a)?,
                    next_state: Array::from_f32(manifest.state_shape.clone(), n)?,
                    done: d[0] != 0.0,
                })?;
            }
            Ok(Dataset::Transitions(buf))
        }
        "trajectories" => {
            if manifest.dtype != "f64-le" {
                return Err(Error::Format(format!("unexpected dtype {}", manifest.dtype)));
            }
            let meta = manifest
                .trajectories
                .ok_or_else(|| Error::Format("trajectory manifest lacks entries".into()))?;
            let total: usize = meta.iter().map(|m| m.len).sum();
            check_payload(payload, total * state_len * 8, &manifest.payload_sha256)?;
            let mut vals = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
            let mut out = Vec::with_capacity(meta.len());
            for m in meta {
                let mut states = Vec::with_capacity(m.len);
                for _ in 0..m.len {
                    let data: Vec<f64> = vals.by_ref().take(state_len).collect();
                    states.push(Array::new(manifest.state_shape.clone(), data)?);
                }
                out.push(ExpertTrajectory {
                    episode: m.episode,
                    env_id: manifest.env_id.clone(),
                    dt: m.dt,
                    start: m.start,
                    states,
                });
            }
            Ok(Dataset::Trajectories(out))
        }
        other => Err(Error::Format(format!("unknown dataset kind `{other}`"))),
    }
}

fn check_payload(payload: &[u8], expected: usize, sha: &str) -> Result<()> {
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "payload has {} bytes, manifest implies {expected}",
            payload.len()
        )));
    }
    if sha256_hex(payload) != sha {
        return Err(Error::Corruption("payload hash mismatch".into()));
    }
    Ok(())
}
