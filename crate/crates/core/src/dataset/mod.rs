//! Dataset ingestion and 5-channel example assembly.
//!
//! Channel order is RGB, clickmap, saliency. Every channel lies in
//! `[-1, 1]`. Images are letterboxed into a `resolution`² square anchored at
//! the top-left; padding carries RGB 0, clickmap −1, saliency 0 and is
//! excluded from the loss through [`TrainingExample::valid`].

mod coco;
mod config;
mod loader;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clicks::ClickError;
use crate::data::{ClassSplit, DataError, DatasetName, ImageSample, InstanceMask, InteractionSet, LoadedImage};
use crate::geometry::{
    euclidean_distance_map, merge_polarity_maps, normalize_channel_in, GeometryError, Letterbox, NormalizeRange,
    Pixel, DEFAULT_EDT_CAP,
};
use crate::saliency::{SaliencyError, SaliencyMap};

pub use coco::{ingest, rasterize_polygons, shoelace_area, IngestOptions, ValidationIssue, ValidationReport};
pub use config::{DatasetSource, ExperimentConfig};
pub use loader::{make_loaders, InteractionIndex, LoadMode, Loader, LoaderConfig, SaliencySource};

pub const CHANNELS: usize = 5;
pub const CLICK_CHANNEL: usize = 3;
pub const SALIENCY_CHANNEL: usize = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("image {0:?} is not in the dataset")]
    UnknownImage(String),
    #[error("instance {0:?} is not in the dataset")]
    UnknownInstance(String),
    #[error("interaction is for instance {got:?}, expected {expected:?}")]
    InteractionMismatch { expected: String, got: String },
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    Shape { what: &'static str, expected: (usize, usize), actual: (usize, usize) },
    #[error("validation failed with {} issue(s); first: {}", .0.issues.len(), .0.issues.first().map(|i| i.to_string()).unwrap_or_default())]
    Validation(ValidationReport),
    #[error("no examples left after filtering ({0})")]
    EmptySelection(String),
    #[error("no interaction record for instance {0:?}")]
    MissingInteraction(String),
    #[error("cannot read image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Clicks(#[from] ClickError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How interactions, saliency and pixels become network input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    /// Side of the square network input.
    pub resolution: usize,
    /// Click distance truncation, in network-input pixels.
    pub edt_cap: f64,
    /// Range of the clickmap channel before padding is applied.
    pub click_range: NormalizeRange,
    /// When false the saliency channel is all zeros (click-only baseline).
    pub use_text: bool,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig { resolution: 512, edt_cap: DEFAULT_EDT_CAP, click_range: NormalizeRange::Signed, use_text: true }
    }
}

/// Network input for one (instance, interaction) pair.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    /// `(5, S, S)`
    pub channels: Array3<f32>,
    /// `(S, S)`
    pub target: Array2<bool>,
    /// Non-padding pixels.
    pub valid: Array2<bool>,
    pub class_name: String,
    pub seen: bool,
    pub instance_id: String,
    pub image_id: String,
    pub letterbox: Letterbox,
}

/// The three input channels built from pixels, clicks and saliency, plus the
/// letterbox that produced them.
pub fn assemble_channels(
    image: &LoadedImage,
    interactions: &InteractionSet,
    saliency: Option<&SaliencyMap>,
    cfg: &AssemblyConfig,
) -> Result<(Array3<f32>, Letterbox), DatasetError> {
    let (h, w) = image.shape();
    interactions.check_bounds(w, h)?;
    let lb = Letterbox::new(h, w, cfg.resolution);
    let valid = lb.valid_mask();
    let side = cfg.resolution;
    let mut out = Array3::<f32>::zeros((CHANNELS, side, side));

    for c in 0..3 {
        let plane = Array2::from_shape_fn((h, w), |(y, x)| image.pixels.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0);
        out.slice_mut(s![c, .., ..]).assign(&lb.apply_f32(plane.view(), 0.0));
    }

    let map = |polarity_positive: bool| {
        interactions
            .clicks
            .iter()
            .filter(|c| (c.polarity == crate::data::Polarity::Positive) == polarity_positive)
            .map(|c| {
                let (y, x) = lb.forward_point(c.y as usize, c.x as usize);
                Pixel::new(y, x)
            })
            .collect::<Vec<_>>()
    };
    let pos = euclidean_distance_map(&map(true), (side, side), cfg.edt_cap)?;
    let negatives = map(false);
    let neg = if negatives.is_empty() { None } else { Some(euclidean_distance_map(&negatives, (side, side), cfg.edt_cap)?) };
    let merged = merge_polarity_maps(&pos, neg.as_ref())?;
    let click = normalize_channel_in(merged.view(), Some(valid.view()), cfg.click_range)?;
    let pad = cfg.click_range.bounds().0 as f32;
    let mut plane = out.slice_mut(s![CLICK_CHANNEL, .., ..]);
    for ((idx, o), &v) in plane.indexed_iter_mut().zip(click.values.iter()) {
        *o = if valid[idx] { v as f32 } else { pad };
    }

    if let (true, Some(sal), Some(_)) = (cfg.use_text, saliency, interactions.text.as_ref()) {
        if sal.shape() != (h, w) {
            return Err(DatasetError::Shape { what: "saliency", expected: (h, w), actual: sal.shape() });
        }
        let resized = lb.apply_f32(sal.values.view(), 0.0).mapv(f64::from);
        let norm = normalize_channel_in(resized.view(), Some(valid.view()), NormalizeRange::Signed)?;
        let mut plane = out.slice_mut(s![SALIENCY_CHANNEL, .., ..]);
        for ((idx, o), &v) in plane.indexed_iter_mut().zip(norm.values.iter()) {
            *o = if valid[idx] { v as f32 } else { 0.0 };
        }
    }
    debug_assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)), "channel values escaped [-1, 1]");
    Ok((out, lb))
}

/// Build the 5-channel example and resized target for one instance.
pub fn assemble_example(
    image: &LoadedImage,
    instance: &InstanceMask,
    interactions: &InteractionSet,
    saliency: Option<&SaliencyMap>,
    seen: bool,
    cfg: &AssemblyConfig,
) -> Result<TrainingExample, DatasetError> {
    if interactions.instance_id != instance.instance_id {
        return Err(DatasetError::InteractionMismatch {
            expected: instance.instance_id.clone(),
            got: interactions.instance_id.clone(),
        });
    }
    if instance.shape() != image.shape() {
        return Err(DatasetError::Shape { what: "instance mask", expected: image.shape(), actual: instance.shape() });
    }
    let (channels, lb) = assemble_channels(image, interactions, saliency, cfg)?;
    let target = lb.apply_mask(instance.decode()?.view());
    Ok(TrainingExample {
        channels,
        target,
        valid: lb.valid_mask(),
        class_name: instance.class_name.clone(),
        seen,
        instance_id: instance.instance_id.clone(),
        image_id: instance.image_id.clone(),
        letterbox: lb,
    })
}

/// Validated images and instances of one dataset.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: Option<DatasetName>,
    pub annotation_paths: Vec<PathBuf>,
    pub image_root: PathBuf,
    /// Path or name of the split file used with this dataset, if any.
    pub split: Option<String>,
    pub counts_per_class: BTreeMap<String, usize>,
    pub images: Vec<ImageSample>,
    pub instances: Vec<InstanceMask>,
    /// Decoded pixels for datasets generated in memory.
    #[serde(skip)]
    pub memory: HashMap<String, Arc<RgbImage>>,
}

impl DatasetManifest {
    /// Manifest over images that live only in memory.
    pub fn in_memory(images: Vec<(ImageSample, RgbImage)>, instances: Vec<InstanceMask>) -> Self {
        let mut memory = HashMap::new();
        let samples = images
            .into_iter()
            .map(|(s, px)| {
                memory.insert(s.image_id.clone(), Arc::new(px));
                s
            })
            .collect();
        let mut m = DatasetManifest { images: samples, instances, memory, ..Default::default() };
        m.recount();
        m
    }

    pub fn recount(&mut self) {
        self.counts_per_class.clear();
        for inst in &self.instances {
            *self.counts_per_class.entry(inst.class_name.clone()).or_default() += 1;
        }
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageSample> {
        self.images.iter().find(|s| s.image_id == image_id)
    }

    pub fn instance(&self, instance_id: &str) -> Option<&InstanceMask> {
        self.instances.iter().find(|i| i.instance_id == instance_id)
    }

    pub fn image_path(&self, sample: &ImageSample) -> PathBuf {
        let p = Path::new(&sample.uri_or_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.image_root.join(p)
        }
    }

    /// Decode an image, from memory when available.
    pub fn load_image(&self, image_id: &str) -> Result<LoadedImage, DatasetError> {
        let sample = self.image(image_id).ok_or_else(|| DatasetError::UnknownImage(image_id.to_string()))?;
        let pixels = match self.memory.get(image_id) {
            Some(px) => px.clone(),
            None => {
                let path = self.image_path(sample);
                let img = image::open(&path).map_err(|source| DatasetError::Image { path, source })?;
                Arc::new(img.to_rgb8())
            }
        };
        Ok(LoadedImage::new(sample.clone(), pixels)?)
    }

    /// Number of instances of `class_name` (normalized) in `image_id`.
    pub fn same_class_count(&self, image_id: &str, class_name: &str) -> usize {
        let key = crate::data::normalize_class_name(class_name);
        self.instances
            .iter()
            .filter(|i| i.image_id == image_id && crate::data::normalize_class_name(&i.class_name) == key)
            .count()
    }

    /// Every annotated class is covered by `split`.
    pub fn check_split(&self, split: &ClassSplit) -> Result<(), DatasetError> {
        Ok(split.check_covers(self.counts_per_class.keys().map(String::as_str))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Click;
    use crate::saliency::stub_saliency;

    fn image(h: u32, w: u32) -> LoadedImage {
        let px = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, 128]));
        let sample = ImageSample { image_id: "img".into(), width: w as usize, height: h as usize, uri_or_path: String::new() };
        LoadedImage::new(sample, Arc::new(px)).unwrap()
    }

    fn instance(h: usize, w: usize) -> InstanceMask {
        let m = Array2::from_shape_fn((h, w), |(y, x)| (10..30).contains(&y) && (10..30).contains(&x));
        InstanceMask::from_mask("img", "i0", "square", &m)
    }

    fn cfg(res: usize) -> AssemblyConfig {
        AssemblyConfig { resolution: res, ..Default::default() }
    }

    #[test]
    fn channels_stay_in_range_and_click_peaks() {
        let img = image(40, 60);
        let set = InteractionSet::new("i0", vec![Click::positive(20, 15), Click::negative(50, 35)], Some("square".into())).unwrap();
        let sal = SaliencyMap::new(stub_saliency((40, 60), "blob:cx=20,cy=20,s=5").unwrap(), "square", "stub").unwrap();
        let ex = assemble_example(&img, &instance(40, 60), &set, Some(&sal), true, &cfg(64)).unwrap();
        assert_eq!(ex.channels.dim(), (5, 64, 64));
        assert!(ex.channels.iter().all(|v| (-1.0..=1.0).contains(v)));
        let (py, px) = ex.letterbox.forward_point(15, 20);
        assert_eq!(ex.channels[[CLICK_CHANNEL, py, px]], 1.0);
        // Padding rows below the content.
        assert!(!ex.valid[[60, 0]]);
        assert_eq!(ex.channels[[CLICK_CHANNEL, 60, 0]], -1.0);
        assert_eq!(ex.channels[[SALIENCY_CHANNEL, 60, 0]], 0.0);
        assert_eq!(ex.channels[[0, 60, 0]], 0.0);
        assert!(!ex.target[[60, 0]]);
    }

    #[test]
    fn text_ablation_zeroes_saliency() {
        let img = image(40, 60);
        let set = InteractionSet::new("i0", vec![Click::positive(20, 15)], Some("square".into())).unwrap();
        let sal = SaliencyMap::new(stub_saliency((40, 60), "blob:cx=20,cy=20,s=5").unwrap(), "square", "stub").unwrap();
        let c = AssemblyConfig { use_text: false, ..cfg(64) };
        let ex = assemble_example(&img, &instance(40, 60), &set, Some(&sal), true, &c).unwrap();
        assert!(ex.channels.slice(s![SALIENCY_CHANNEL, .., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(ex.channels.dim().0, 5);
    }

    #[test]
    fn stub_blob_survives_resize() {
        // Blob centre at source (x=36, y=22) on a 48x72 image resized to 96.
        let img = image(48, 72);
        let m = Array2::from_shape_fn((48, 72), |(y, x)| y > 10 && y < 30 && x > 20 && x < 50);
        let inst = InstanceMask::from_mask("img", "i0", "square", &m);
        let set = InteractionSet::new("i0", vec![Click::positive(36, 22)], Some("square".into())).unwrap();
        let sal = SaliencyMap::new(stub_saliency((48, 72), "blob:cx=36,cy=22,s=6").unwrap(), "square", "stub").unwrap();
        let ex = assemble_example(&img, &inst, &set, Some(&sal), true, &cfg(96)).unwrap();
        let plane = ex.channels.slice(s![SALIENCY_CHANNEL, .., ..]);
        let (mut best, mut at) = (f32::MIN, (0, 0));
        for ((y, x), &v) in plane.indexed_iter() {
            if v > best {
                best = v;
                at = (y, x);
            }
        }
        let expect = ((22.0 + 0.5) * 96.0 / 72.0 - 0.5, (36.0 + 0.5) * 96.0 / 72.0 - 0.5);
        assert!((at.0 as f64 - expect.0).abs() <= 1.0 && (at.1 as f64 - expect.1).abs() <= 1.0, "{at:?} vs {expect:?}");
        assert_eq!(best, 1.0);
    }

    #[test]
    fn mismatched_interaction_rejected() {
        let img = image(40, 60);
        let set = InteractionSet::new("other", vec![Click::positive(1, 1)], None).unwrap();
        assert!(matches!(
            assemble_example(&img, &instance(40, 60), &set, None, true, &cfg(32)),
            Err(DatasetError::InteractionMismatch { .. })
        ));
    }
}
