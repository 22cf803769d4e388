//! Checkpoints: one safetensors file with every tensor plus a JSON sidecar.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelBundle, TrainConfig, Trainer};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: u32,
    pub iteration: usize,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub optimizer_steps: BTreeMap<String, u64>,
    /// SHA-256 of the tensor file.
    pub tensors_sha256: String,
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub models: ModelBundle,
    pub tensors: HashMap<String, Tensor>,
    pub path: PathBuf,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let stem = match stem.extension().and_then(|e| e.to_str()) {
        Some("safetensors" | "json") => stem.with_extension(""),
        _ => stem.to_path_buf(),
    };
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (
        stem.with_file_name(format!("{name}.safetensors")),
        stem.with_file_name(format!("{name}.json")),
    )
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `<stem>.safetensors` and `<stem>.json`; returns the tensor file path.
pub fn save_checkpoint(stem: impl AsRef<Path>, trainer: &Trainer) -> Result<PathBuf> {
    let (tensor_path, meta_path) = paths(stem.as_ref());
    if let Some(parent) = tensor_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tensors = HashMap::new();
    for (prefix, store) in trainer.models.stores() {
        tensors.extend(store.export(prefix)?);
    }
    let mut optimizer_steps = BTreeMap::new();
    for (prefix, opt) in trainer.optims.named() {
        tensors.extend(opt.export(prefix));
        optimizer_steps.insert(prefix.to_string(), opt.steps_taken());
    }
    candle_core::safetensors::save(&tensors, &tensor_path)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        iteration: trainer.iteration,
        config: trainer.config.clone(),
        rng: trainer.rng.clone(),
        optimizer_steps,
        tensors_sha256: sha256_file(&tensor_path)?,
    };
    let text = serde_json::to_string_pretty(&meta)? + "\n";
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(tensor_path)
}

/// Reads a checkpoint written by [`save_checkpoint`] and rebuilds its networks in `dtype`.
/// `path` may name either file or their common stem.
pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType) -> Result<LoadedCheckpoint> {
    let (tensor_path, meta_path) = paths(path.as_ref());
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format {}", meta.format)));
    }
    if !tensor_path.exists() {
        return Err(Error::io(
            &tensor_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint tensors missing"),
        ));
    }
    let hash = sha256_file(&tensor_path)?;
    if hash != meta.tensors_sha256 {
        return Err(Error::Data(format!(
            "{}: content hash {hash} does not match the sidecar",
            tensor_path.display()
        )));
    }
    meta.config.validate()?;
    let tensors = candle_core::safetensors::load(&tensor_path, &Device::Cpu)?;
    let models = super::build_models(&meta.config.model, dtype, meta.config.seed)?;
    for (prefix, store) in models.stores() {
        store.import(&tensors, prefix)?;
    }
    Ok(LoadedCheckpoint {
        meta,
        models,
        tensors,
        path: tensor_path,
    })
}
