//! Model checkpoints.
//!
//! Layout: the line `USPCKPT 1`, one line of JSON header (tracker config,
//! parameter manifest, payload checksum, optional run-config snapshot),
//! then every parameter as little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use usptrack_core::encoder::Encoder;
use usptrack_core::params::ParamStore;
use usptrack_core::tracker::{Tracker, TrackerConfig};
use usptrack_core::{Error, Result, Tensor};

use crate::io_error;

pub const CHECKPOINT_MAGIC: &str = "USPCKPT 1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tracker: TrackerConfig,
    pub params: Vec<ParamEntry>,
    /// Total number of `f64` values in the payload.
    pub scalars: usize,
    /// Hex SHA-256 of the payload bytes.
    pub sha256: String,
    /// Resolved run configuration (TOML) that produced the weights.
    #[serde(default)]
    pub snapshot: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

fn weights_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Weights(format!("{}: {msg}", path.display()))
}

pub fn manifest(store: &ParamStore) -> Vec<ParamEntry> {
    store.iter().map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect()
}

pub fn encode_checkpoint(cfg: &TrackerConfig, store: &ParamStore, snapshot: Option<&str>, note: Option<&str>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(store.num_scalars() * 8);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        tracker: cfg.clone(),
        params: manifest(store),
        scalars: store.num_scalars(),
        sha256: hex::encode(Sha256::digest(&payload)),
        snapshot: snapshot.map(str::to_string),
        note: note.map(str::to_string),
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut out = Vec::with_capacity(payload.len() + json.len() + 16);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(path: &Path, tracker: &Tracker, snapshot: Option<&str>, note: Option<&str>) -> Result<()> {
    let bytes = encode_checkpoint(tracker.config(), &tracker.params, snapshot, note);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let k = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..k], &bytes[k + 1..]))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let (magic, rest) = split_line(bytes).ok_or_else(|| weights_err(path, "truncated before the header"))?;
    if magic != CHECKPOINT_MAGIC.as_bytes() {
        return Err(weights_err(path, format_args!("not a checkpoint (expected `{CHECKPOINT_MAGIC}`)")));
    }
    let (json, payload) = split_line(rest).ok_or_else(|| weights_err(path, "truncated inside the header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| weights_err(path, format_args!("malformed header: {e}")))?;
    let declared: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if declared != header.scalars {
        return Err(weights_err(path, format_args!("manifest lists {declared} values, header says {}", header.scalars)));
    }
    if payload.len() != header.scalars * 8 {
        return Err(weights_err(
            path,
            format_args!("truncated payload: expected {} bytes, found {}", header.scalars * 8, payload.len()),
        ));
    }
    let digest = hex::encode(Sha256::digest(payload));
    if digest != header.sha256 {
        return Err(weights_err(path, "payload checksum mismatch"));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = header
        .params
        .iter()
        .map(|p| {
            let len = p.shape.iter().product();
            (p.name.clone(), Tensor::from_vec(&p.shape, values.by_ref().take(len).collect()))
        })
        .collect();
    Ok(Checkpoint { header, tensors })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Rebuild a tracker from a checkpoint. Every model parameter must be
/// present with its configured shape.
pub fn load_tracker(path: &Path) -> Result<(Tracker, CheckpointHeader)> {
    let ckpt = read_checkpoint(path)?;
    let mut tracker = Tracker::new(ckpt.header.tracker.clone())?;
    let missing: Vec<&str> = tracker
        .params
        .iter()
        .map(|(_, p)| p.name.as_str())
        .filter(|n| !ckpt.tensors.iter().any(|(m, _)| m == n))
        .collect();
    if !missing.is_empty() {
        return Err(weights_err(path, format_args!("missing parameters: {}", missing.join(", "))));
    }
    tracker.params.assign_named(&ckpt.tensors).map_err(|e| match e {
        Error::Weights(m) => weights_err(path, m),
        other => other,
    })?;
    Ok((tracker, ckpt.header))
}

/// Overwrite the encoder of `tracker` with the encoder weights stored in
/// `path`. The manifest and checksum are verified before anything is
/// assigned. Returns the number of tensors replaced.
pub fn load_pretrained(tracker: &mut Tracker, path: &Path) -> Result<usize> {
    let ckpt = read_checkpoint(path)?;
    Encoder::load_weights(&mut tracker.params, &ckpt.tensors).map_err(|e| match e {
        Error::Weights(m) => weights_err(path, m),
        other => other,
    })
}
