use std::collections::HashMap;
use std::sync::RwLock;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{check_text, Capabilities, DeviceKind, SaliencyBackend, SaliencyError, SaliencyMap};
use crate::data::{normalize_class_name, LoadedImage};

const EMBED_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
}

/// Parse `blob:cx=<x>,cy=<y>,s=<sigma>` with further blobs after `;`
/// (each optionally repeating the `blob:` prefix).
pub fn parse_blob_spec(spec: &str) -> Result<Vec<Blob>, SaliencyError> {
    let bad = |reason: &str| SaliencyError::BadSpec { spec: spec.to_string(), reason: reason.to_string() };
    let body = spec.trim().strip_prefix("blob:").ok_or_else(|| bad("missing `blob:` prefix"))?;
    let mut blobs = Vec::new();
    for part in body.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let part = part.strip_prefix("blob:").unwrap_or(part);
        let (mut cx, mut cy, mut s) = (None, None, None);
        for kv in part.split(',') {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(&format!("expected key=value, got {kv:?}")))?;
            let v: f64 = v.trim().parse().map_err(|_| bad(&format!("{:?} is not a number", v.trim())))?;
            if !v.is_finite() {
                return Err(bad("values must be finite"));
            }
            match k.trim() {
                "cx" => cx = Some(v),
                "cy" => cy = Some(v),
                "s" => s = Some(v),
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        let (Some(cx), Some(cy), Some(sigma)) = (cx, cy, s) else {
            return Err(bad("each blob needs cx, cy and s"));
        };
        if sigma <= 0.0 {
            return Err(bad("s must be positive"));
        }
        blobs.push(Blob { cx, cy, sigma });
    }
    if blobs.is_empty() {
        return Err(bad("no blobs"));
    }
    Ok(blobs)
}

/// Sum of unit-peak Gaussians over an `(h, w)` grid.
pub fn stub_saliency(shape: (usize, usize), spec: &str) -> Result<Array2<f32>, SaliencyError> {
    let blobs = parse_blob_spec(spec)?;
    Ok(Array2::from_shape_fn(shape, |(y, x)| {
        blobs
            .iter()
            .map(|b| {
                let (dx, dy) = (x as f64 - b.cx, y as f64 - b.cy);
                (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum::<f64>() as f32
    }))
}

/// Analytic backend. Text is either a blob spec, or a phrase registered as an
/// alias for one (globally or for a single image id).
#[derive(Debug, Default)]
pub struct StubBackend {
    aliases: RwLock<HashMap<(Option<String>, String), String>>,
}

impl StubBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_alias(&self, phrase: &str, spec: &str) -> Result<(), SaliencyError> {
        self.insert(None, phrase, spec)
    }

    pub fn add_image_alias(&self, image_id: &str, phrase: &str, spec: &str) -> Result<(), SaliencyError> {
        self.insert(Some(image_id.to_string()), phrase, spec)
    }

    /// Copy every alias of `other` into `self`.
    pub fn absorb(&self, other: &StubBackend) {
        let theirs = other.aliases.read().expect("alias lock").clone();
        self.aliases.write().expect("alias lock").extend(theirs);
    }

    /// Register the per-image aliases of `from` again under image id `to`.
    pub fn copy_image_aliases(&self, from: &str, to: &str) {
        let mut aliases = self.aliases.write().expect("alias lock");
        let copies: Vec<_> = aliases
            .iter()
            .filter(|((img, _), _)| img.as_deref() == Some(from))
            .map(|((_, phrase), spec)| ((Some(to.to_string()), phrase.clone()), spec.clone()))
            .collect();
        aliases.extend(copies);
    }

    fn insert(&self, image: Option<String>, phrase: &str, spec: &str) -> Result<(), SaliencyError> {
        parse_blob_spec(spec)?;
        let phrase = normalize_class_name(check_text(phrase)?);
        self.aliases.write().expect("alias lock").insert((image, phrase), spec.to_string());
        Ok(())
    }

    fn resolve(&self, image_id: &str, text: &str) -> Result<String, SaliencyError> {
        if text.starts_with("blob:") {
            return Ok(text.to_string());
        }
        let phrase = normalize_class_name(text);
        let aliases = self.aliases.read().expect("alias lock");
        aliases
            .get(&(Some(image_id.to_string()), phrase.clone()))
            .or_else(|| aliases.get(&(None, phrase)))
            .cloned()
            .ok_or_else(|| SaliencyError::UnknownPhrase(text.to_string()))
    }
}

impl SaliencyBackend for StubBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { batching: true, device: DeviceKind::Cpu }
    }

    fn compute(&self, image: &LoadedImage, text: &str) -> Result<SaliencyMap, SaliencyError> {
        let text = check_text(text)?;
        let spec = self.resolve(&image.sample.image_id, text)?;
        SaliencyMap::new(stub_saliency(image.shape(), &spec)?, text, self.id())
    }

    /// Pseudo-random unit vector seeded by the normalized phrase.
    fn embed_text(&self, phrase: &str) -> Result<Vec<f32>, SaliencyError> {
        let phrase = normalize_class_name(check_text(phrase)?);
        let digest = Sha256::digest(phrase.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let v: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageSample;
    use image::RgbImage;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn image(id: &str, h: usize, w: usize) -> LoadedImage {
        let sample = ImageSample { image_id: id.into(), width: w, height: h, uri_or_path: String::new() };
        LoadedImage::new(sample, Arc::new(RgbImage::new(w as u32, h as u32))).unwrap()
    }

    #[test]
    fn single_blob_values() {
        let m = stub_saliency((3, 3), "blob:cx=0,cy=0,s=1").unwrap();
        assert_eq!(m[[0, 0]], 1.0);
        assert!((m[[0, 1]] - (-0.5f32).exp()).abs() < 1e-7);
        assert!((m[[0, 1]] - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn argmax_is_center() {
        let b = StubBackend::new();
        let m = b.compute(&image("a", 32, 32), "blob:cx=16,cy=16,s=4").unwrap();
        assert_eq!(m.argmax(), (16, 16));
        assert_eq!(m.shape(), (32, 32));
    }

    #[test]
    fn blobs_add() {
        let a = stub_saliency((10, 12), "blob:cx=2,cy=3,s=1.5").unwrap();
        let b = stub_saliency((10, 12), "blob:cx=9,cy=1,s=2").unwrap();
        let ab = stub_saliency((10, 12), "blob:cx=2,cy=3,s=1.5;cx=9,cy=1,s=2").unwrap();
        let ab2 = stub_saliency((10, 12), "blob:cx=2,cy=3,s=1.5;blob:cx=9,cy=1,s=2").unwrap();
        assert_eq!(ab, ab2);
        for ((p, q), r) in a.iter().zip(b.iter()).zip(ab.iter()) {
            assert!((p + q - r).abs() < 1e-6);
        }
    }

    #[test]
    fn parse_errors_quote_spec() {
        for bad in ["cx=1,cy=2,s=1", "blob:cx=1,cy=2", "blob:cx=a,cy=2,s=1", "blob:cx=1,cy=2,s=0", "blob:"] {
            match stub_saliency((4, 4), bad) {
                Err(SaliencyError::BadSpec { spec, .. }) => assert_eq!(spec, bad),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn aliases_resolve_per_image() {
        let b = StubBackend::new();
        b.add_alias("dog", "blob:cx=1,cy=1,s=1").unwrap();
        b.add_image_alias("img2", "Dog", "blob:cx=5,cy=5,s=1").unwrap();
        assert_eq!(b.compute(&image("img1", 8, 8), "dog").unwrap().argmax(), (1, 1));
        assert_eq!(b.compute(&image("img2", 8, 8), "dog").unwrap().argmax(), (5, 5));
        assert!(matches!(b.compute(&image("img1", 8, 8), "cat"), Err(SaliencyError::UnknownPhrase(_))));
        assert!(matches!(b.compute(&image("img1", 8, 8), "  "), Err(SaliencyError::EmptyText)));
    }

    #[test]
    fn embedding_is_unit_and_stable() {
        let b = StubBackend::new();
        let e = b.embed_text("dog").unwrap();
        let n: f32 = e.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        assert_eq!(e, b.embed_text("dog").unwrap());
        assert_ne!(e, b.embed_text("airplane").unwrap());
    }

    proptest! {
        #[test]
        fn matches_direct_formula(
            blobs in prop::collection::vec((0i32..20, 0i32..16, 0.5f64..6.0), 1..4),
            h in 1usize..16, w in 1usize..20,
        ) {
            let spec = format!(
                "blob:{}",
                blobs.iter().map(|(x, y, s)| format!("cx={x},cy={y},s={s}")).collect::<Vec<_>>().join(";")
            );
            let map = stub_saliency((h, w), &spec).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let mut expect = 0.0f64;
                    for &(cx, cy, s) in &blobs {
                        let d2 = ((x as i32 - cx).pow(2) + (y as i32 - cy).pow(2)) as f64;
                        expect += (-d2 / (2.0 * s * s)).exp();
                    }
                    prop_assert!((map[[y, x]] as f64 - expect).abs() < 1e-6);
                }
            }
        }
    }
}
