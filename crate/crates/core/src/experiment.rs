//! End-to-end runs driven by an [`ExperimentConfig`]: load data, synthesize
//! clicks, train, evaluate.

use std::path::Path;
use std::sync::Arc;

use candle_core::Device;
use thiserror::Error;

use crate::clicks::{synthesize_interactions, ClickError, InteractionRecord, InteractionSpec, SynthesisMode, SynthesisStats};
use crate::data::ClassSplit;
use crate::dataset::{
    ingest, make_loaders, DatasetError, DatasetManifest, DatasetSource, ExperimentConfig, IngestOptions, InteractionIndex,
    LoadMode, SaliencySource,
};
use crate::eval::{evaluate, interaction_sweep, EvalError, EvalOptions, EvalReport, SweepTable};
use crate::model::{train, Checkpoint, TrainError, TrainOutcome, TrainingManifest};
use crate::saliency::{open_backend, SaliencyCache, SaliencyError, StubBackend};
use crate::synthetic;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Clicks(#[from] ClickError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Data, split and saliency for one experiment config.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train_set: DatasetManifest,
    pub eval_set: DatasetManifest,
    pub split: ClassSplit,
    /// `None` when the config trains without text.
    pub saliency: Option<SaliencySource>,
}

fn load_source(cfg: &ExperimentConfig, src: &DatasetSource, stub: &StubBackend) -> Result<DatasetManifest, DatasetError> {
    match src {
        DatasetSource::Synthetic { scenes } => {
            let set = synthetic::generate(scenes);
            stub.absorb(&set.saliency);
            Ok(set.dataset)
        }
        DatasetSource::Coco { annotations, image_root, strict } => {
            let opts = IngestOptions { strict: *strict, ..Default::default() };
            let (manifest, report) = ingest(cfg.resolve(annotations), cfg.resolve(image_root), &opts)?;
            if !report.issues.is_empty() {
                tracing::warn!(issues = report.issues.len(), "dataset validation issues");
            }
            Ok(manifest)
        }
    }
}

impl Experiment {
    pub fn open(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        let stub = Arc::new(StubBackend::new());
        let train_set = load_source(&config, &config.dataset, &stub)?;
        let eval_set = match &config.eval_dataset {
            Some(src) => load_source(&config, src, &stub)?,
            None => train_set.clone(),
        };
        let split = config.load_split()?;
        let saliency = if config.assembly.use_text {
            let backend: Arc<dyn crate::saliency::SaliencyBackend> = if config.backend == "stub" {
                stub
            } else {
                open_backend(&config.backend, config.registry.as_deref().map(|p| config.resolve(p)).as_deref())?
            };
            let cache = match &config.cache_dir {
                Some(dir) => SaliencyCache::with_dir(config.resolve(dir)),
                None => SaliencyCache::in_memory(),
            };
            Some(SaliencySource { backend, cache: Arc::new(cache) })
        } else {
            None
        };
        Ok(Experiment { config, train_set, eval_set, split, saliency })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        Self::open(ExperimentConfig::load(path)?)
    }

    /// Training interactions for seen-class instances.
    pub fn synthesize(&self) -> Result<(Vec<InteractionRecord>, SynthesisStats), ExperimentError> {
        Ok(synthesize_interactions(&self.train_set.instances, Some(&self.split), &self.config.clicks, SynthesisMode::Train)?)
    }

    pub fn manifest(&self) -> TrainingManifest {
        let backend_id = self.saliency.as_ref().map_or("none".to_string(), |s| s.backend.id().to_string());
        let model = self.config.model_config().expect("validated when the config was parsed");
        TrainingManifest::new(&self.config.name, backend_id, self.config.clicks.clone(), self.config.assembly.clone(), model)
            .with_split(Some(self.config.split.clone()), &self.split)
    }

    /// Synthesize clicks and train for the configured number of steps.
    pub fn train(&self, out_dir: Option<&Path>, device: &Device) -> Result<TrainOutcome, ExperimentError> {
        let (records, stats) = self.synthesize()?;
        tracing::info!(instances = stats.instances, samples = stats.samples, relaxed = stats.relaxed, "clicks synthesized");
        let index = InteractionIndex::from_records(records);
        let loader = make_loaders(
            &self.train_set,
            &self.split,
            LoadMode::Train,
            &index,
            self.saliency.clone(),
            self.config.assembly.clone(),
            self.config.loader_config()?,
            None,
        )?;
        let model = self.config.model_config()?;
        Ok(train(&model, loader.cycle(), out_dir, self.manifest(), device)?)
    }

    pub fn evaluate(&self, checkpoint: &Checkpoint, spec: InteractionSpec, opts: &EvalOptions) -> Result<EvalReport, ExperimentError> {
        Ok(evaluate(checkpoint, &self.eval_set, &self.split, spec, &self.config.eval_clicks(), self.saliency.as_ref(), opts)?)
    }

    pub fn sweep(&self, checkpoint: &Checkpoint, specs: &[InteractionSpec], opts: &EvalOptions) -> Result<SweepTable, ExperimentError> {
        Ok(interaction_sweep(checkpoint, &self.eval_set, &self.split, specs, &self.config.eval_clicks(), self.saliency.as_ref(), opts)?)
    }
}
