//! Checkpoint directory: `manifest.json` plus one contiguous `params.bin`.
//!
//! Tensors are stored little-endian, row-major, in their own dtype (`f32`
//! for normal models), in manifest order. Adam moments follow the
//! parameters as `adam.m.<name>` / `adam.v.<name>`. Every tensor carries a
//! SHA-256 of its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::params::Moments;
use crate::nn::{DType, ParameterStore, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

/// Serializable ChaCha8 position: seed, stream and word position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal string; the position is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::CorruptCheckpoint(format!("rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed is not 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub task: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub step: u64,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
    pub metrics_tail: Vec<serde_json::Value>,
    pub rng: Option<RngState>,
}

/// Fields of the manifest supplied by the caller.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub task: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub step: u64,
    pub metrics_tail: Vec<serde_json::Value>,
    pub rng: Option<RngState>,
}

fn encode(data: &[f64], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * dtype.size());
    for &v in data {
        match dtype {
            DType::F32 => out.extend((v as f32).to_le_bytes()),
            DType::F64 => out.extend(v.to_le_bytes()),
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `dir/params.bin` then `dir/manifest.json`, each via a temporary
/// file and rename.
pub fn save_checkpoint(dir: &Path, store: &ParameterStore, meta: &CheckpointMeta) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, dtype: DType, data: &[f64]| {
        let bytes = encode(data, dtype);
        tensors.push(TensorEntry {
            name,
            shape,
            dtype,
            offset: blob.len() as u64,
            length: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        blob.extend(bytes);
    };
    for (name, p) in store.iter() {
        push(name.to_string(), p.shape.clone(), p.dtype, &p.data);
    }
    for (name, m) in store.moments() {
        let p = store
            .get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("moments for unknown parameter {name:?}")))?;
        push(format!("{MOMENT_M}{name}"), p.shape.clone(), p.dtype, &m.m);
        push(format!("{MOMENT_V}{name}"), p.shape.clone(), p.dtype, &m.v);
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        task: meta.task.clone(),
        config: meta.config.clone(),
        epoch: meta.epoch,
        step: meta.step,
        optimizer_step: store.step(),
        tensors,
        metrics_tail: meta.metrics_tail.clone(),
        rng: meta.rng.clone(),
    };
    write_atomic(&dir.join(PARAMS_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::VersionMismatch {
                found: v as u32,
                expected: CHECKPOINT_FORMAT_VERSION,
            })
        }
        None => return Err(Error::CorruptCheckpoint("manifest lacks format_version".into())),
    }
    serde_json::from_value(raw).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))
}

/// Loads and verifies a checkpoint: sizes, offsets and per-tensor hashes.
pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(PARAMS_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    let total: u64 = manifest.tensors.iter().map(|t| t.length).sum();
    if total != blob.len() as u64 {
        return Err(corrupt(format!("{PARAMS_FILE} holds {} bytes, index expects {total}", blob.len())));
    }
    let mut expected_offset = 0u64;
    let mut store = ParameterStore::new();
    let mut moments: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        if t.offset != expected_offset || t.length != (n * t.dtype.size()) as u64 {
            return Err(corrupt(format!("tensor {} has inconsistent offset or length", t.name)));
        }
        expected_offset += t.length;
        let bytes = &blob[t.offset as usize..(t.offset + t.length) as usize];
        if hex::encode(Sha256::digest(bytes)) != t.sha256 {
            return Err(corrupt(format!("hash mismatch for tensor {}", t.name)));
        }
        let data = decode(bytes, t.dtype);
        if let Some(p) = t.name.strip_prefix(MOMENT_M) {
            moments.entry(p.to_string()).or_default().0 = Some(data);
        } else if let Some(p) = t.name.strip_prefix(MOMENT_V) {
            moments.entry(p.to_string()).or_default().1 = Some(data);
        } else {
            store.insert(&t.name, Tensor::new(t.shape.clone(), data), t.dtype)?;
        }
    }
    let mut mom = BTreeMap::new();
    for (name, pair) in moments {
        match pair {
            (Some(m), Some(v)) if store.contains(&name) => {
                mom.insert(name, Moments { m, v });
            }
            _ => return Err(corrupt(format!("incomplete optimizer state for {name}"))),
        }
    }
    store.set_optimizer_state(manifest.optimizer_step, mom);
    Ok((store, manifest))
}

/// Epoch checkpoint directories under `root`, ordered by epoch.
pub fn list_checkpoints(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    v.sort();
    v
}
