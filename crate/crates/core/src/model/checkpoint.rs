use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::SegNet;
use super::train::ModelConfig;
use crate::clicks::ClickConfig;
use crate::data::ClassSplit;
use crate::dataset::AssemblyConfig;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint manifest {path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("checkpoint weights {path}: {source}")]
    Weights { path: PathBuf, source: candle_core::Error },
}

/// Everything needed to re-run the experiment that produced a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub git_revision: String,
    pub crate_version: String,
    pub dataset: String,
    pub split_file: Option<String>,
    /// sha256 of the split's canonical JSON.
    pub split_hash: Option<String>,
    pub click_config: ClickConfig,
    pub backend_id: String,
    /// Vision-language backbone behind the saliency backend, when there is one.
    pub saliency_backbone: Option<String>,
    pub assembly: AssemblyConfig,
    pub model: ModelConfig,
    /// Optimizer steps taken when the checkpoint was written.
    pub iteration: usize,
}

impl TrainingManifest {
    pub fn new(dataset: impl Into<String>, backend_id: impl Into<String>, click_config: ClickConfig, assembly: AssemblyConfig, model: ModelConfig) -> Self {
        TrainingManifest {
            git_revision: git_revision(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset: dataset.into(),
            split_file: None,
            split_hash: None,
            click_config,
            backend_id: backend_id.into(),
            saliency_backbone: None,
            assembly,
            model,
            iteration: 0,
        }
    }

    pub fn with_split(mut self, file: Option<String>, split: &ClassSplit) -> Self {
        self.split_file = file;
        self.split_hash = Some(split_hash(split));
        self
    }
}

pub fn split_hash(split: &ClassSplit) -> String {
    let json = serde_json::to_vec(split).expect("split serializes");
    hex::encode(Sha256::digest(&json))
}

/// `git rev-parse HEAD` of the working directory, or `"unknown"`.
pub fn git_revision() -> String {
    if let Ok(rev) = std::env::var("CLICKSEG_GIT_REV") {
        return rev;
    }
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// A network with the manifest describing how it was trained. On disk it is
/// `<stem>.safetensors` plus `<stem>.json`.
pub struct Checkpoint {
    pub net: SegNet,
    pub manifest: TrainingManifest,
}

impl Checkpoint {
    pub fn save(&self, stem: &Path) -> Result<(), CheckpointError> {
        Self::save_parts(&self.net, &self.manifest, stem)
    }

    pub(crate) fn save_parts(net: &SegNet, manifest: &TrainingManifest, stem: &Path) -> Result<(), CheckpointError> {
        let weights = stem.with_extension("safetensors");
        let json = stem.with_extension("json");
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io { path: dir.to_path_buf(), source })?;
        }
        net.params().save(&weights).map_err(|source| CheckpointError::Weights { path: weights.clone(), source })?;
        let text = serde_json::to_vec_pretty(manifest).map_err(|source| CheckpointError::Manifest { path: json.clone(), source })?;
        std::fs::write(&json, text).map_err(|source| CheckpointError::Io { path: json, source })
    }

    /// Load from either file of the pair (or their shared stem).
    pub fn load(path: &Path, device: &Device) -> Result<Self, CheckpointError> {
        let weights = path.with_extension("safetensors");
        let json = path.with_extension("json");
        let text = std::fs::read(&json).map_err(|source| CheckpointError::Io { path: json.clone(), source })?;
        let manifest: TrainingManifest =
            serde_json::from_slice(&text).map_err(|source| CheckpointError::Manifest { path: json.clone(), source })?;
        let net = SegNet::new(manifest.model.net.clone(), manifest.model.seed, DType::F32, device)
            .map_err(|source| CheckpointError::Weights { path: weights.clone(), source })?;
        net.params().load(&weights).map_err(|source| CheckpointError::Weights { path: weights, source })?;
        Ok(Checkpoint { net, manifest })
    }

    /// Fresh, untrained network for `model` (useful for smoke tests).
    pub fn untrained(manifest: TrainingManifest, device: &Device) -> candle_core::Result<Self> {
        let net = SegNet::new(manifest.model.net.clone(), manifest.model.seed, DType::F32, device)?;
        Ok(Checkpoint { net, manifest })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Tensor;

    #[test]
    fn save_load_is_bitwise() {
        let dev = Device::Cpu;
        let manifest = TrainingManifest::new("toy", "stub", ClickConfig::default(), AssemblyConfig::default(), ModelConfig::toy());
        let ck = Checkpoint::untrained(TrainingManifest { model: ModelConfig { seed: 5, ..ModelConfig::toy() }, ..manifest }, &dev).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        ck.save(&stem).unwrap();
        let back = Checkpoint::load(&stem.with_extension("json"), &dev).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        let x = Tensor::randn(0f32, 1.0, (1, 5, 24, 24), &dev).unwrap();
        let a = ck.net.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.net.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(&dir.path().join("none"), &Device::Cpu), Err(CheckpointError::Io { .. })));
    }
}
