use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AssemblyConfig, DatasetError, LoaderConfig};
use crate::clicks::ClickConfig;
use crate::data::ClassSplit;
use crate::model::ModelConfig;
use crate::synthetic::SceneConfig;

/// Where examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Coco {
        annotations: PathBuf,
        image_root: PathBuf,
        #[serde(default)]
        strict: bool,
    },
    Synthetic {
        #[serde(default)]
        scenes: SceneConfig,
    },
}

/// Model preset plus the handful of fields experiments usually change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub preset: String,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub checkpoint_every: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { preset: "desk".into(), iterations: None, batch_size: None, seed: None, lr: None, checkpoint_every: None }
    }
}

/// One experiment, read from TOML. Relative paths resolve against the
/// config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    /// Held-out data for evaluation; defaults to `dataset`.
    #[serde(default)]
    pub eval_dataset: Option<DatasetSource>,
    /// Split file path, or a built-in split name such as `voc_5seen` or
    /// `shapes` (the synthetic square/disk split) or `shapes_full` (both seen).
    pub split: String,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub clicks: ClickConfig,
    /// Seed of the clicks used at evaluation time.
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    #[serde(default)]
    pub assembly: AssemblyConfig,
    #[serde(default)]
    pub loader: LoaderConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_backend() -> String {
    "maskclip".into()
}

fn default_eval_seed() -> u64 {
    1_000_003
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| DatasetError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.model_config()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_split(&self) -> Result<ClassSplit, DatasetError> {
        if self.split == "shapes" {
            return Ok(crate::synthetic::shape_split());
        }
        if self.split == "shapes_full" {
            return Ok(crate::synthetic::full_shape_split());
        }
        if let Some(split) = ClassSplit::builtin(&self.split) {
            return Ok(split);
        }
        Ok(ClassSplit::load(self.resolve(Path::new(&self.split)))?)
    }

    pub fn model_config(&self) -> Result<ModelConfig, DatasetError> {
        let m = &self.model;
        let mut cfg = ModelConfig::preset(&m.preset).ok_or_else(|| DatasetError::Config(format!("unknown model preset {:?}", m.preset)))?;
        if let Some(v) = m.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = m.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = m.seed {
            cfg.seed = v;
        }
        if let Some(v) = m.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        if let Some(lr) = m.lr {
            match &mut cfg.optimizer {
                crate::model::OptimizerConfig::AdamW { lr: l, .. } | crate::model::OptimizerConfig::Sgd { lr: l, .. } => *l = lr,
            }
        }
        cfg.validate().map_err(|e| DatasetError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Loader settings with the batch size taken from the model section.
    pub fn loader_config(&self) -> Result<LoaderConfig, DatasetError> {
        Ok(LoaderConfig { batch_size: self.model_config()?.batch_size, ..self.loader.clone() })
    }

    /// Click config for evaluation: the training rules with the eval seed,
    /// one sample per instance.
    pub fn eval_clicks(&self) -> ClickConfig {
        ClickConfig { rng_seed: self.eval_seed, samples_per_instance: 1, mix: Vec::new(), ..self.clicks.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
name = "shapes"
split = "shapes.json"
backend = "stub"

[dataset]
kind = "synthetic"
scenes = { images = 10, size = 48, seed = 3 }

[clicks]
d_border = 3.0
d_between = 10.0

[assembly]
resolution = 48
use_text = false

[model]
preset = "toy"
iterations = 5
lr = 0.01
"#;

    #[test]
    fn parses_with_defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml(TOY, "/tmp/x").unwrap();
        assert_eq!(cfg.backend, "stub");
        assert!(matches!(&cfg.dataset, DatasetSource::Synthetic { scenes } if scenes.images == 10 && scenes.noise == SceneConfig::default().noise));
        assert_eq!(cfg.clicks.d_between, 10.0);
        assert_eq!(cfg.clicks.d_border, 3.0);
        assert_eq!(cfg.clicks.samples_per_instance, 1);
        let m = cfg.model_config().unwrap();
        assert_eq!(m.iterations, 5);
        assert_eq!(m.optimizer.base_lr(), 0.01);
        assert_eq!(cfg.resolve(Path::new("shapes.json")), PathBuf::from("/tmp/x/shapes.json"));
        assert_eq!(cfg.eval_clicks().rng_seed, 1_000_003);
    }

    #[test]
    fn unknown_preset_rejected() {
        let bad = TOY.replace("preset = \"toy\"", "preset = \"huge\"");
        assert!(ExperimentConfig::from_toml(&bad, ".").is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        let mut n = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                n += 1;
            }
        }
        assert!(n >= 3);
    }
}
