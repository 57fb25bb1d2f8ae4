//! Encoder checkpoints: a TOML manifest naming every tensor, plus a
//! little-endian `f64` payload so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{EncoderConfig, EncoderState, InitRecord};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "pstl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunningEntry {
    name: String,
    len: usize,
    /// Mean occupies `offset..offset+len`, variance the `len` values after it.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    payload: String,
    payload_len: usize,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    encoder: EncoderConfig,
    init: InitRecord,
    params: Vec<TensorEntry>,
    running: Vec<RunningEntry>,
}

/// A saved encoder plus free-form string metadata (modality, pretraining
/// mode, step count and so on).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: EncoderState,
    pub meta: BTreeMap<String, String>,
}

fn payload_path(manifest: &Path, payload: &str) -> PathBuf {
    manifest
        .parent()
        .map(|d| d.join(payload))
        .unwrap_or_else(|| PathBuf::from(payload))
}

pub fn save_checkpoint(
    state: &EncoderState,
    meta: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let payload = format!("{stem}.bin");
    let mut values: Vec<f64> = Vec::new();
    let mut params = Vec::with_capacity(state.params.len());
    for p in &state.params {
        params.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape.clone(),
            offset: values.len(),
        });
        values.extend_from_slice(&p.tensor.data);
    }
    let mut running = Vec::with_capacity(state.running.len());
    for r in &state.running {
        running.push(RunningEntry {
            name: r.name.clone(),
            len: r.mean.len(),
            offset: values.len(),
        });
        values.extend_from_slice(&r.mean);
        values.extend_from_slice(&r.var);
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        payload: payload.clone(),
        payload_len: values.len(),
        meta: meta.clone(),
        encoder: state.config.clone(),
        init: state.init.clone(),
        params,
        running,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Config(format!("serializing checkpoint manifest: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
    let bin = payload_path(path, &payload);
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let m: Manifest = toml::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(malformed(format!(
            "unsupported format {:?} version {}",
            m.format, m.version
        )));
    }
    let bin = payload_path(path, &m.payload);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 || bytes.len() / 8 != m.payload_len {
        return Err(Error::PayloadShape {
            path: bin,
            expected: m.payload_len,
            found: bytes.len() / 8,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if let Some(offset) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { path: bin, offset });
    }

    // Rebuild from the config so names, order and shapes are checked against
    // the architecture rather than trusted from the file.
    let mut state = EncoderState::init(&m.encoder, m.init.seed)?;
    state.init = m.init;
    if m.params.len() != state.params.len() || m.running.len() != state.running.len() {
        return Err(Error::CheckpointMismatch(format!(
            "expected {} tensors and {} norm layers, found {} and {}",
            state.params.len(),
            state.running.len(),
            m.params.len(),
            m.running.len()
        )));
    }
    let slice = |offset: usize, len: usize| -> Result<&[f64]> {
        values.get(offset..offset + len).ok_or_else(|| Error::PayloadShape {
            path: bin.clone(),
            expected: offset + len,
            found: values.len(),
        })
    };
    for (p, e) in state.params.iter_mut().zip(&m.params) {
        if p.name != e.name || p.tensor.shape != e.shape {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {} {:?} does not match {} {:?}",
                e.name, e.shape, p.name, p.tensor.shape
            )));
        }
        let n = p.tensor.numel();
        p.tensor.data.copy_from_slice(slice(e.offset, n)?);
    }
    for (r, e) in state.running.iter_mut().zip(&m.running) {
        if r.name != e.name || r.mean.len() != e.len {
            return Err(Error::CheckpointMismatch(format!(
                "norm layer {} ({}) does not match {} ({})",
                e.name,
                e.len,
                r.name,
                r.mean.len()
            )));
        }
        r.mean.copy_from_slice(slice(e.offset, e.len)?);
        r.var.copy_from_slice(slice(e.offset + e.len, e.len)?);
    }
    Ok(Checkpoint { state, meta: m.meta })
}
