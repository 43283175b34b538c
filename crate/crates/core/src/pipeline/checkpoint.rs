use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::DetectorConfig;
use crate::error::{Error, Result};
use crate::nn::fnv1a;

use super::config::Config;
use super::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADJVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: Config,
    params: Vec<ParamEntry>,
}

/// Single-file checkpoint:
/// magic, version (u32), metadata length (u64), JSON metadata holding the
/// config and the parameter layout, raw little-endian `f64` values, and an
/// FNV-1a checksum (u64) over metadata and values.
pub fn save_checkpoint(model: &Model, config: &Config, path: &Path) -> Result<()> {
    let mut config = config.clone();
    config.model = model.config.clone();
    config.seed = model.seed;
    let meta = Metadata {
        config,
        params: model
            .store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut body = Vec::with_capacity(meta.len() + model.store.num_scalars() * 8);
    body.extend_from_slice(&meta);
    for (_, t) in model.store.iter() {
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut bytes = Vec::with_capacity(body.len() + 28);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&body);
    bytes.extend_from_slice(&fnv1a(&body).to_le_bytes());
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn corrupt(path: &Path, what: &str) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

fn arch_diff(expected: &DetectorConfig, found: &DetectorConfig) -> Option<String> {
    if expected.widths != found.widths {
        Some(format!("model.widths: expected {:?}, checkpoint has {:?}", expected.widths, found.widths))
    } else if expected.fusion_width != found.fusion_width {
        Some(format!(
            "model.fusion_width: expected {}, checkpoint has {}",
            expected.fusion_width, found.fusion_width
        ))
    } else if expected.head_width != found.head_width {
        Some(format!(
            "model.head_width: expected {}, checkpoint has {}",
            expected.head_width, found.head_width
        ))
    } else {
        None
    }
}

/// Restores a model and the config it was saved with. With `expected` set,
/// a checkpoint of a different architecture is rejected.
pub fn load_checkpoint(path: &Path, expected: Option<&DetectorConfig>) -> Result<(Model, Config)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() < 28 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(path, &format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(corrupt(path, "checksum mismatch"));
    }
    if meta_len > body.len() {
        return Err(corrupt(path, "truncated metadata"));
    }
    let meta: Metadata =
        serde_json::from_slice(&body[..meta_len]).map_err(|e| corrupt(path, &e.to_string()))?;
    if let Some(exp) = expected {
        if let Some(diff) = arch_diff(exp, &meta.config.model) {
            return Err(Error::ArchitectureMismatch(diff));
        }
    }
    let mut model = Model::new(&meta.config.model, meta.config.seed);
    if model.store.len() != meta.params.len() {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint has {} parameters, model has {}",
            meta.params.len(),
            model.store.len()
        )));
    }
    let mut payload = &body[meta_len..];
    for (entry, (name, t)) in meta.params.iter().zip(model.store.iter()) {
        if entry.name != name || entry.shape != t.shape() {
            return Err(Error::ArchitectureMismatch(format!(
                "parameter {} {:?} vs {} {:?}",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
        }
    }
    let ids: Vec<_> = meta
        .params
        .iter()
        .map(|e| model.store.id(&e.name).expect("names checked"))
        .collect();
    for id in ids {
        let n = model.store.get(id).len();
        if payload.len() < n * 8 {
            return Err(corrupt(path, "truncated parameter data"));
        }
        let (chunk, rest) = payload.split_at(n * 8);
        for (dst, src) in model.store.get_mut(id).data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
        }
        payload = rest;
    }
    if !payload.is_empty() {
        return Err(corrupt(path, "trailing data"));
    }
    Ok((model, meta.config))
}
