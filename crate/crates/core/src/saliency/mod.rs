//! Text-to-pixel saliency.
//!
//! A [`SaliencyBackend`] turns an image and a phrase into an H×W map of
//! text relevance. [`MaskClipBackend`] reads dense patch features out of a
//! CLIP vision transformer; [`StubBackend`] draws analytic Gaussian blobs so
//! the whole pipeline runs without pretrained weights.

mod cache;
mod clip;
mod stub;
mod tokenizer;

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LoadedImage;

pub use cache::{image_hash, text_hash, SaliencyCache};
pub use clip::{ClipConfig, ClipModel, MaskClipBackend, MaskClipOptions, Readout, RegistryEntry, TextConfig, VisionConfig};
pub use stub::{parse_blob_spec, stub_saliency, Blob, StubBackend};
pub use tokenizer::{ClipTokenizer, CONTEXT_LENGTH};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("text must not be empty")]
    EmptyText,
    #[error("bad blob spec {spec:?}: {reason}")]
    BadSpec { spec: String, reason: String },
    #[error("stub backend has no blob spec or alias for {0:?}")]
    UnknownPhrase(String),
    #[error("phrase tokenizes to {tokens} tokens, over the context length {limit}")]
    TextTooLong { tokens: usize, limit: usize },
    #[error("weights for backend {backend:?} unavailable at {path}: {reason}\n{instructions}")]
    WeightsUnavailable { backend: String, path: String, reason: String, instructions: String },
    #[error("checksum mismatch for {path}: expected {expected}, got {actual}")]
    Checksum { path: String, expected: String, actual: String },
    #[error("backend {0:?} is a placeholder and cannot compute saliency")]
    Unimplemented(String),
    #[error("unknown backend {0:?}; expected one of stub, maskclip, gradcam, transformer_explainability")]
    UnknownBackend(String),
    #[error("non-finite saliency value")]
    NonFinite,
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("npy: {0}")]
    Npy(String),
    #[error("registry: {0}")]
    Registry(String),
}

/// Single-channel text relevance over an image, at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Array2<f32>,
    pub text: String,
    pub backend_id: String,
}

impl SaliencyMap {
    pub fn new(values: Array2<f32>, text: impl Into<String>, backend_id: impl Into<String>) -> Result<Self, SaliencyError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SaliencyError::NonFinite);
        }
        Ok(SaliencyMap { values, text: text.into(), backend_id: backend_id.into() })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `(y, x)` of the largest value, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = ((0, 0), f32::NEG_INFINITY);
        for (p, &v) in self.values.indexed_iter() {
            if v > best.1 {
                best = (p, v);
            }
        }
        best.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Cpu,
    Cuda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub batching: bool,
    pub device: DeviceKind,
}

/// Thread-safe saliency producer. Identical inputs give identical maps.
pub trait SaliencyBackend: Send + Sync {
    fn id(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    /// Map of shape `image.shape()`.
    fn compute(&self, image: &LoadedImage, text: &str) -> Result<SaliencyMap, SaliencyError>;

    /// Unit-norm text embedding.
    fn embed_text(&self, phrase: &str) -> Result<Vec<f32>, SaliencyError>;
}

/// Placeholder for backends that share the interface but have no implementation.
#[derive(Clone, Debug)]
pub struct PlaceholderBackend {
    id: String,
}

impl PlaceholderBackend {
    pub fn new(id: impl Into<String>) -> Self {
        PlaceholderBackend { id: id.into() }
    }
}

impl SaliencyBackend for PlaceholderBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { batching: false, device: DeviceKind::Cpu }
    }

    fn compute(&self, _: &LoadedImage, _: &str) -> Result<SaliencyMap, SaliencyError> {
        Err(SaliencyError::Unimplemented(self.id.clone()))
    }

    fn embed_text(&self, _: &str) -> Result<Vec<f32>, SaliencyError> {
        Err(SaliencyError::Unimplemented(self.id.clone()))
    }
}

/// Construct a backend by name. `maskclip` needs a registry file.
pub fn open_backend(name: &str, registry: Option<&Path>) -> Result<Arc<dyn SaliencyBackend>, SaliencyError> {
    match name {
        "stub" => Ok(Arc::new(StubBackend::new())),
        "maskclip" => {
            let path = registry.unwrap_or(Path::new(clip::DEFAULT_REGISTRY));
            Ok(Arc::new(MaskClipBackend::from_registry(path, None)?))
        }
        "gradcam" | "transformer_explainability" => Ok(Arc::new(PlaceholderBackend::new(name))),
        other => Err(SaliencyError::UnknownBackend(other.to_string())),
    }
}

pub(crate) fn check_text(text: &str) -> Result<&str, SaliencyError> {
    let t = text.trim();
    if t.is_empty() {
        Err(SaliencyError::EmptyText)
    } else {
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_refuse() {
        let b = open_backend("gradcam", None).unwrap();
        assert_eq!(b.id(), "gradcam");
        assert!(matches!(b.embed_text("dog"), Err(SaliencyError::Unimplemented(_))));
        assert!(matches!(open_backend("nope", None), Err(SaliencyError::UnknownBackend(_))));
    }

    #[test]
    fn non_finite_maps_rejected() {
        let mut v = Array2::zeros((2, 2));
        v[[1, 1]] = f32::NAN;
        assert!(SaliencyMap::new(v, "x", "stub").is_err());
    }
}
