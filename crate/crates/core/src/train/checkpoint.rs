//! Checkpoint directories: `manifest.json`, `params.bin`, optional
//! `optimizer.bin`, and the vocabulary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Architecture, Model};
use crate::params::ParamStore;
use crate::sequence::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub entries: Vec<TensorEntry>,
    #[serde(default)]
    pub optimizer: Option<OptimizerInfo>,
    pub architecture: Architecture,
    pub predicates: Vec<String>,
    pub classes: Vec<String>,
    /// Resolved run configuration, stored verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Loaded checkpoint contents, not yet bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<Vec<f32>>,
    pub optimizer: Option<AdamState<f32>>,
    pub vocab: Vocabulary,
}

fn encode(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode(bytes: &[u8], file: &str, sizes: &[usize]) -> Result<Vec<Vec<f32>>> {
    let expected = 4 * sizes.iter().sum::<usize>();
    if bytes.len() != expected {
        return Err(CheckpointError::Truncated {
            file: file.to_string(),
            expected,
            found: bytes.len(),
        }
        .into());
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &n in sizes {
        out.push(
            bytes[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
        at += 4 * n;
    }
    Ok(out)
}

/// Writes `model` (and optionally the optimizer state) into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model<f32>,
    optimizer: Option<&AdamState<f32>>,
    predicates: &[String],
    classes: &[String],
    config: &serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = model
        .store
        .iter()
        .map(|(_, p)| TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: "f32".into(),
        })
        .collect();
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        entries,
        optimizer: optimizer.map(|o| OptimizerInfo { step: o.t }),
        architecture: model.arch,
        predicates: predicates.to_vec(),
        classes: classes.to_vec(),
        config: config.clone(),
    };
    let mut bytes = Vec::with_capacity(4 * model.store.total_count());
    for (_, p) in model.store.iter() {
        encode(p.tensor.data(), &mut bytes);
    }
    write(&dir.join(PARAMS_FILE), &bytes)?;
    let opt_path = dir.join(OPTIMIZER_FILE);
    match optimizer {
        Some(o) => {
            if !o.matches(&model.store) {
                return Err(Error::invalid(
                    "save_checkpoint",
                    "optimizer state does not match the parameters",
                ));
            }
            let mut bytes = Vec::with_capacity(8 * model.store.total_count());
            for m in o.m.iter().chain(&o.v) {
                encode(m, &mut bytes);
            }
            write(&opt_path, &bytes)?;
        }
        None if opt_path.exists() => fs::remove_file(&opt_path).map_err(|e| Error::io(&opt_path, e))?,
        None => {}
    }
    model.vocab.save(&dir.join(VOCAB_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write(&path, text.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let text = read(&path)?;
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))?;
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let manifest: CheckpointManifest = serde_json::from_value(raw).map_err(|e| Error::json(&path, e))?;
    if let Some(e) = manifest.entries.iter().find(|e| e.dtype != "f32") {
        return Err(CheckpointError::Dtype(e.dtype.clone()).into());
    }
    let sizes: Vec<usize> = manifest.entries.iter().map(|e| e.shape.iter().product()).collect();
    let tensors = decode(&read(&dir.join(PARAMS_FILE))?, PARAMS_FILE, &sizes)?;
    let optimizer = match &manifest.optimizer {
        Some(info) => {
            let doubled: Vec<usize> = sizes.iter().chain(&sizes).copied().collect();
            let mut mv = decode(&read(&dir.join(OPTIMIZER_FILE))?, OPTIMIZER_FILE, &doubled)?;
            let v = mv.split_off(sizes.len());
            Some(AdamState { t: info.step, m: mv, v })
        }
        None => None,
    };
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    Ok(Checkpoint {
        manifest,
        tensors,
        optimizer,
        vocab,
    })
}

/// Copies checkpoint tensors into `store`, matching by name. Every model
/// parameter must be present with the same shape and vice versa.
pub fn restore_params(store: &mut ParamStore<f32>, ckpt: &Checkpoint) -> Result<()> {
    for entry in &ckpt.manifest.entries {
        let p = store
            .by_name(&entry.name)
            .ok_or_else(|| CheckpointError::UnexpectedParameter(entry.name.clone()))?;
        if p.tensor.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                found: entry.shape.clone(),
                expected: p.tensor.shape().to_vec(),
            }
            .into());
        }
    }
    if let Some((_, p)) = store
        .iter()
        .find(|(_, p)| !ckpt.manifest.entries.iter().any(|e| e.name == p.name))
    {
        return Err(CheckpointError::MissingParameter(p.name.clone()).into());
    }
    for (entry, values) in ckpt.manifest.entries.iter().zip(&ckpt.tensors) {
        let p = store.by_name_mut(&entry.name).expect("checked above");
        p.tensor.data_mut().copy_from_slice(values);
    }
    Ok(())
}

/// Reorders checkpoint optimizer moments into store order.
pub fn restore_optimizer(store: &ParamStore<f32>, ckpt: &Checkpoint) -> Option<AdamState<f32>> {
    let saved = ckpt.optimizer.as_ref()?;
    let mut state = AdamState::new(store);
    state.t = saved.t;
    for (i, entry) in ckpt.manifest.entries.iter().enumerate() {
        let id = store.id(&entry.name)?;
        state.m[id.index()].clone_from(&saved.m[i]);
        state.v[id.index()].clone_from(&saved.v[i]);
    }
    Some(state)
}

/// Rebuilds the model described by a checkpoint and loads its weights.
pub fn load_model(dir: &Path) -> Result<(Model<f32>, Checkpoint)> {
    let ckpt = load_checkpoint(dir)?;
    let mut model = Model::new(ckpt.manifest.architecture, ckpt.vocab.clone(), 0)?;
    restore_params(&mut model.store, &ckpt)?;
    Ok((model, ckpt))
}
