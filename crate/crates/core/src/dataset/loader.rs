use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assemble_example, AssemblyConfig, DatasetError, DatasetManifest, TrainingExample};
use crate::clicks::{sample_interaction, ClickConfig, InteractionRecord};
use crate::data::{normalize_class_name, ClassSplit, InstanceMask, InteractionSet, LoadedImage};
use crate::saliency::{SaliencyBackend, SaliencyCache, SaliencyMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadMode {
    /// Seen-class instances in images that contain them, every stored sample,
    /// reshuffled each epoch.
    Train,
    /// Every instance once (sample 0) in dataset order.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Draw fresh clicks every epoch instead of using the stored ones.
    pub resample_clicks: bool,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        LoaderConfig { batch_size: 8, shuffle_seed: 0, resample_clicks: false }
    }
}

/// Interaction records grouped by instance id.
#[derive(Clone, Debug, Default)]
pub struct InteractionIndex {
    by_instance: HashMap<String, Vec<InteractionRecord>>,
}

impl InteractionIndex {
    pub fn from_records(records: impl IntoIterator<Item = InteractionRecord>) -> Self {
        let mut by_instance: HashMap<String, Vec<InteractionRecord>> = HashMap::new();
        for r in records {
            by_instance.entry(r.interaction.instance_id.clone()).or_default().push(r);
        }
        for v in by_instance.values_mut() {
            v.sort_by_key(|r| r.sample);
        }
        InteractionIndex { by_instance }
    }

    pub fn samples(&self, instance_id: &str) -> &[InteractionRecord] {
        self.by_instance.get(instance_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, instance_id: &str, sample: usize) -> Option<&InteractionSet> {
        self.samples(instance_id).iter().find(|r| r.sample == sample).map(|r| &r.interaction)
    }

    pub fn len(&self) -> usize {
        self.by_instance.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_instance.is_empty()
    }
}

/// A saliency backend behind its cache.
#[derive(Clone)]
pub struct SaliencySource {
    pub backend: Arc<dyn SaliencyBackend>,
    pub cache: Arc<SaliencyCache>,
}

impl SaliencySource {
    pub fn new(backend: Arc<dyn SaliencyBackend>) -> Self {
        SaliencySource { backend, cache: Arc::new(SaliencyCache::in_memory()) }
    }

    pub fn fetch(&self, image: &LoadedImage, text: &str) -> Result<Arc<SaliencyMap>, DatasetError> {
        Ok(self.cache.get_or_compute(self.backend.as_ref(), image, text)?)
    }
}

#[derive(Clone, Debug)]
struct Item {
    instance: usize,
    sample: usize,
}

/// Lazily assembles batches of [`TrainingExample`]s.
pub struct Loader<'a> {
    dataset: &'a DatasetManifest,
    split: &'a ClassSplit,
    interactions: &'a InteractionIndex,
    saliency: Option<SaliencySource>,
    assembly: AssemblyConfig,
    cfg: LoaderConfig,
    clicks: Option<ClickConfig>,
    mode: LoadMode,
    items: Vec<Item>,
}

/// Select and order the examples of `dataset` for `mode`.
///
/// Train mode keeps seen-class instances only, so images holding nothing but
/// unseen classes never appear. `clicks` is required when
/// `cfg.resample_clicks` is set.
#[allow(clippy::too_many_arguments)]
pub fn make_loaders<'a>(
    dataset: &'a DatasetManifest,
    split: &'a ClassSplit,
    mode: LoadMode,
    interactions: &'a InteractionIndex,
    saliency: Option<SaliencySource>,
    assembly: AssemblyConfig,
    cfg: LoaderConfig,
    clicks: Option<ClickConfig>,
) -> Result<Loader<'a>, DatasetError> {
    if cfg.batch_size == 0 {
        return Err(DatasetError::Config("batch_size must be at least 1".into()));
    }
    if cfg.resample_clicks && clicks.is_none() {
        return Err(DatasetError::Config("resample_clicks needs a click config".into()));
    }
    let mut items = Vec::new();
    for (i, inst) in dataset.instances.iter().enumerate() {
        match mode {
            LoadMode::Train => {
                if !split.is_seen(&inst.class_name) {
                    continue;
                }
                let samples = interactions.samples(&inst.instance_id);
                if samples.is_empty() && !cfg.resample_clicks {
                    return Err(DatasetError::MissingInteraction(inst.instance_id.clone()));
                }
                let n = if cfg.resample_clicks { clicks.as_ref().map_or(1, |c| c.samples_per_instance) } else { samples.len() };
                items.extend((0..n).map(|s| Item { instance: i, sample: s }));
            }
            LoadMode::Eval => {
                if interactions.get(&inst.instance_id, 0).is_none() {
                    return Err(DatasetError::MissingInteraction(inst.instance_id.clone()));
                }
                items.push(Item { instance: i, sample: 0 });
            }
        }
    }
    if items.is_empty() {
        return Err(DatasetError::EmptySelection(format!("{mode:?} mode")));
    }
    Ok(Loader { dataset, split, interactions, saliency, assembly, cfg, clicks, mode, items })
}

impl<'a> Loader<'a> {
    /// Examples per epoch.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.items.len().div_ceil(self.cfg.batch_size)
    }

    /// Instance ids in the order of `epoch`.
    pub fn instance_order(&self, epoch: usize) -> Vec<&str> {
        self.order(epoch).iter().map(|it| self.dataset.instances[it.instance].instance_id.as_str()).collect()
    }

    fn order(&self, epoch: usize) -> Vec<Item> {
        let mut items = self.items.clone();
        if self.mode == LoadMode::Train {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.shuffle_seed);
            rng.set_stream(epoch as u64);
            items.shuffle(&mut rng);
        }
        items
    }

    /// Batch `index` of `epoch`, assembled in parallel.
    pub fn batch(&self, epoch: usize, index: usize) -> Result<Vec<TrainingExample>, DatasetError> {
        let order = self.order(epoch);
        let bs = self.cfg.batch_size;
        let chunk = order.get(index * bs..((index + 1) * bs).min(order.len())).unwrap_or(&[]);
        chunk.par_iter().map(|it| self.assemble(it, epoch)).collect()
    }

    /// Every batch of one epoch, in order.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<Vec<TrainingExample>, DatasetError>> + '_ {
        (0..self.batches_per_epoch()).map(move |i| self.batch(epoch, i))
    }

    /// Endless stream of batches, epoch after epoch.
    pub fn cycle(&self) -> impl Iterator<Item = Result<Vec<TrainingExample>, DatasetError>> + '_ {
        let per = self.batches_per_epoch();
        (0..).map(move |k| self.batch(k / per, k % per))
    }

    fn interaction_for(&self, it: &Item, epoch: usize) -> Result<InteractionSet, DatasetError> {
        let inst = &self.dataset.instances[it.instance];
        match (&self.clicks, self.cfg.resample_clicks) {
            (Some(cfg), true) => {
                let key = normalize_class_name(&inst.class_name);
                let others = self
                    .dataset
                    .instances
                    .iter()
                    .enumerate()
                    .filter(|(j, o)| *j != it.instance && o.image_id == inst.image_id && normalize_class_name(&o.class_name) == key)
                    .map(|(_, o)| o.decode())
                    .collect::<Result<Vec<_>, _>>()?;
                let sample = epoch * cfg.samples_per_instance + it.sample;
                Ok(sample_interaction(inst, it.instance, sample, &others, cfg)?.0)
            }
            _ => self
                .interactions
                .get(&inst.instance_id, it.sample)
                .cloned()
                .ok_or_else(|| DatasetError::MissingInteraction(inst.instance_id.clone())),
        }
    }

    fn assemble(&self, it: &Item, epoch: usize) -> Result<TrainingExample, DatasetError> {
        let inst: &InstanceMask = &self.dataset.instances[it.instance];
        let image = self.dataset.load_image(&inst.image_id)?;
        let interaction = self.interaction_for(it, epoch)?;
        let saliency = match (&self.saliency, &interaction.text, self.assembly.use_text) {
            (Some(src), Some(text), true) => Some(src.fetch(&image, text)?),
            _ => None,
        };
        let seen = self.split.is_seen(&inst.class_name);
        assemble_example(&image, inst, &interaction, saliency.as_deref(), seen, &self.assembly)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicks::{synthesize_interactions, SynthesisMode};
    use crate::data::{DatasetName, ImageSample};
    use image::RgbImage;
    use ndarray::Array2;

    /// Five images: 0..3 hold a seen "square" each, 3 and 4 only an unseen "disk".
    /// Image 0 also holds a disk.
    fn fixture() -> (DatasetManifest, ClassSplit) {
        let mut images = Vec::new();
        let mut instances = Vec::new();
        for i in 0..5 {
            let id = format!("img{i}");
            images.push((ImageSample { image_id: id.clone(), width: 32, height: 32, uri_or_path: String::new() }, RgbImage::new(32, 32)));
            let m = Array2::from_shape_fn((32, 32), |(y, x)| (4..20).contains(&y) && (4..20).contains(&x));
            let class = if i < 3 { "square" } else { "disk" };
            instances.push(InstanceMask::from_mask(id.clone(), format!("{id}/a"), class, &m));
            if i == 0 {
                let d = Array2::from_shape_fn((32, 32), |(y, x)| (22..30).contains(&y) && (22..30).contains(&x));
                instances.push(InstanceMask::from_mask(id.clone(), format!("{id}/b"), "disk", &d));
            }
        }
        let split = ClassSplit::new(DatasetName::Custom, ["square"], ["disk"]).unwrap();
        (DatasetManifest::in_memory(images, instances), split)
    }

    fn clicks() -> ClickConfig {
        ClickConfig { d_border: 2.0, d_between: 4.0, ..Default::default() }
    }

    #[test]
    fn train_mode_drops_unseen_only_images() {
        let (ds, split) = fixture();
        let (recs, _) = synthesize_interactions(&ds.instances, Some(&split), &clicks(), SynthesisMode::Eval).unwrap();
        let index = InteractionIndex::from_records(recs);
        let asm = AssemblyConfig { resolution: 32, use_text: false, ..Default::default() };
        let loader = make_loaders(&ds, &split, LoadMode::Train, &index, None, asm, LoaderConfig::default(), None).unwrap();
        assert_eq!(loader.len(), 3);
        for epoch in 0..3 {
            for batch in loader.epoch(epoch) {
                for ex in batch.unwrap() {
                    assert!(ex.seen);
                    assert!(!["img3", "img4"].contains(&ex.image_id.as_str()));
                }
            }
        }
    }

    #[test]
    fn eval_order_is_stable_and_batches_split() {
        let (ds, split) = fixture();
        let (recs, _) = synthesize_interactions(&ds.instances, Some(&split), &clicks(), SynthesisMode::Eval).unwrap();
        let index = InteractionIndex::from_records(recs);
        let asm = AssemblyConfig { resolution: 32, use_text: false, ..Default::default() };
        let cfg = LoaderConfig { batch_size: 4, ..Default::default() };
        let loader = make_loaders(&ds, &split, LoadMode::Eval, &index, None, asm, cfg, None).unwrap();
        assert_eq!(loader.instance_order(0), loader.instance_order(7));
        let sizes: Vec<usize> = loader.epoch(0).map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 2]);
    }

    #[test]
    fn ten_instances_batch_as_4_4_2() {
        let mut images = Vec::new();
        let mut instances = Vec::new();
        for i in 0..10 {
            let id = format!("i{i}");
            images.push((ImageSample { image_id: id.clone(), width: 16, height: 16, uri_or_path: String::new() }, RgbImage::new(16, 16)));
            let m = Array2::from_shape_fn((16, 16), |(y, x)| (3..13).contains(&y) && (3..13).contains(&x));
            instances.push(InstanceMask::from_mask(id.clone(), id, "square", &m));
        }
        let ds = DatasetManifest::in_memory(images, instances);
        let split = ClassSplit::all_seen(DatasetName::Custom, ["square"]);
        let (recs, _) = synthesize_interactions(&ds.instances, Some(&split), &clicks(), SynthesisMode::Train).unwrap();
        let index = InteractionIndex::from_records(recs);
        let asm = AssemblyConfig { resolution: 16, use_text: false, ..Default::default() };
        let cfg = LoaderConfig { batch_size: 4, shuffle_seed: 9, ..Default::default() };
        let loader = make_loaders(&ds, &split, LoadMode::Train, &index, None, asm, cfg, None).unwrap();
        let sizes: Vec<usize> = loader.epoch(0).map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        // Shuffles are seeded per epoch.
        assert_eq!(loader.instance_order(1), loader.instance_order(1));
        assert_ne!(loader.instance_order(0), loader.instance_order(1));
        let mut sorted = loader.instance_order(1);
        sorted.sort();
        let mut expect: Vec<&str> = ds.instances.iter().map(|i| i.instance_id.as_str()).collect();
        expect.sort();
        assert_eq!(sorted, expect);
    }

    #[test]
    fn resampling_changes_clicks_between_epochs() {
        let (ds, split) = fixture();
        let index = InteractionIndex::default();
        let asm = AssemblyConfig { resolution: 32, use_text: false, ..Default::default() };
        let cfg = LoaderConfig { batch_size: 8, resample_clicks: true, ..Default::default() };
        let loader = make_loaders(&ds, &split, LoadMode::Train, &index, None, asm, cfg, Some(clicks())).unwrap();
        let a = loader.batch(0, 0).unwrap();
        let b = loader.batch(1, 0).unwrap();
        let click_plane = |ex: &TrainingExample| ex.channels.index_axis(ndarray::Axis(0), 3).to_owned();
        let find = |v: &[TrainingExample], id: &str| v.iter().find(|e| e.instance_id == id).map(click_plane).unwrap();
        let differs = ["img0/a", "img1/a", "img2/a"].iter().any(|id| find(&a, id) != find(&b, id));
        assert!(differs);
    }
}
