use std::path::{Path, PathBuf};
use std::sync::Arc;

use dashmap::DashMap;
use ndarray::Array2;
use ndarray_npy::{read_npy, write_npy};
use sha2::{Digest, Sha256};

use super::{check_text, SaliencyBackend, SaliencyError, SaliencyMap};
use crate::data::LoadedImage;

/// First 16 hex chars of SHA-256 over the dimensions and raw RGB bytes.
pub fn image_hash(image: &LoadedImage) -> String {
    let mut h = Sha256::new();
    h.update((image.pixels.width() as u64).to_le_bytes());
    h.update((image.pixels.height() as u64).to_le_bytes());
    h.update(image.pixels.as_raw());
    hex::encode(&h.finalize()[..8])
}

pub fn text_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

type Key = (String, String, String);

/// Concurrent memo of saliency maps keyed by (image hash, text, backend id),
/// optionally backed by `<dir>/<backend>/<image_hash>/<text_hash>.npy`.
#[derive(Debug, Default)]
pub struct SaliencyCache {
    mem: DashMap<Key, Arc<SaliencyMap>>,
    dir: Option<PathBuf>,
}

impl SaliencyCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        SaliencyCache { mem: DashMap::new(), dir: Some(dir.into()) }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.mem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mem.is_empty()
    }

    pub fn npy_path(&self, backend_id: &str, image_hash: &str, text: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(backend_id).join(image_hash).join(format!("{}.npy", text_hash(text))))
    }

    pub fn get_or_compute(
        &self,
        backend: &dyn SaliencyBackend,
        image: &LoadedImage,
        text: &str,
    ) -> Result<Arc<SaliencyMap>, SaliencyError> {
        let text = check_text(text)?;
        let ihash = image_hash(image);
        let key = (ihash.clone(), text.to_string(), backend.id().to_string());
        if let Some(hit) = self.mem.get(&key) {
            return Ok(hit.clone());
        }
        let path = self.npy_path(backend.id(), &ihash, text);
        let from_disk = path.as_ref().filter(|p| p.exists()).and_then(|p| match read_npy::<_, Array2<f32>>(p) {
            Ok(values) if values.dim() == image.shape() => SaliencyMap::new(values, text, backend.id()).ok(),
            Ok(_) | Err(_) => {
                tracing::warn!(path = %p.display(), "ignoring unreadable or mis-shaped cache entry");
                None
            }
        });
        let map = match from_disk {
            Some(map) => map,
            None => {
                let map = backend.compute(image, text)?;
                if let Some(path) = &path {
                    store(path, &map.values)?;
                }
                map
            }
        };
        Ok(self.mem.entry(key).or_insert_with(|| Arc::new(map)).clone())
    }
}

fn store(path: &Path, values: &Array2<f32>) -> Result<(), SaliencyError> {
    let parent = path.parent().expect("cache paths have a parent");
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{}.tmp", std::process::id()));
    write_npy(&tmp, values).map_err(|e| SaliencyError::Npy(e.to_string()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageSample;
    use crate::saliency::StubBackend;
    use image::RgbImage;

    fn image() -> LoadedImage {
        let sample = ImageSample { image_id: "a".into(), width: 20, height: 12, uri_or_path: String::new() };
        let pixels = RgbImage::from_fn(20, 12, |x, y| image::Rgb([x as u8, y as u8, 7]));
        LoadedImage::new(sample, Arc::new(pixels)).unwrap()
    }

    #[test]
    fn cached_equals_uncached() {
        let backend = StubBackend::new();
        let img = image();
        let direct = backend.compute(&img, "blob:cx=4,cy=5,s=2").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = SaliencyCache::with_dir(dir.path());
        let first = cache.get_or_compute(&backend, &img, "blob:cx=4,cy=5,s=2").unwrap();
        assert_eq!(*first, direct);
        let path = cache.npy_path("stub", &image_hash(&img), "blob:cx=4,cy=5,s=2").unwrap();
        assert!(path.exists());
        let again = cache.get_or_compute(&backend, &img, "blob:cx=4,cy=5,s=2").unwrap();
        assert!(Arc::ptr_eq(&first, &again));
        // A fresh cache over the same directory reads the npy file back bit-for-bit.
        let cold = SaliencyCache::with_dir(dir.path());
        assert_eq!(*cold.get_or_compute(&backend, &img, "blob:cx=4,cy=5,s=2").unwrap(), direct);
    }

    #[test]
    fn hashes_are_stable_and_distinct() {
        let img = image();
        assert_eq!(image_hash(&img), image_hash(&img));
        assert_eq!(image_hash(&img).len(), 16);
        assert_ne!(text_hash("dog"), text_hash("cat"));
    }
}
