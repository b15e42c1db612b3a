use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointError, TrainingManifest};
use super::net::{masked_cross_entropy, NetConfig, NetError, SegNet, IN_CHANNELS, OUT_CLASSES};
use crate::dataset::{DatasetError, TrainingExample, CHANNELS};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step}; diagnostics in {}", .bundle.as_deref().map(|p| p.display().to_string()).unwrap_or_else(|| "memory".into()))]
    NonFinite { step: usize, loss: f32, diagnostics: Box<Diagnostics>, bundle: Option<PathBuf> },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch examples disagree on shape")]
    RaggedBatch,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    AdamW { lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    /// Heavy-ball momentum; weight decay is added to the gradient as an L2 term.
    Sgd { lr: f64, momentum: f64, weight_decay: f64 },
}

impl OptimizerConfig {
    pub fn base_lr(&self) -> f64 {
        match self {
            OptimizerConfig::AdamW { lr, .. } | OptimizerConfig::Sgd { lr, .. } => *lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `(base - min_lr) * (1 - t / T)^power + min_lr`
    Poly { power: f64, min_lr: f64 },
}

impl LrSchedule {
    pub fn at(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Poly { power, min_lr } => {
                let frac = 1.0 - step.min(total) as f64 / total.max(1) as f64;
                (base - min_lr) * frac.powf(*power) + min_lr
            }
        }
    }
}

/// Network shape plus training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_classes: usize,
    /// Preset name of `net`, recorded for humans.
    pub backbone: String,
    pub net: NetConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    /// Intermediate checkpoint interval; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl ModelConfig {
    /// ResNet-34 encoder, 90K iterations at batch 32, SGD with poly decay
    /// (lr 0.01, momentum 0.9, weight decay 5e-4, power 0.9, floor 1e-4).
    pub fn full() -> Self {
        ModelConfig {
            in_channels: IN_CHANNELS,
            out_classes: OUT_CLASSES,
            backbone: "resnet34".into(),
            net: NetConfig::resnet34(),
            iterations: 90_000,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerConfig::Sgd { lr: 0.01, momentum: 0.9, weight_decay: 5e-4 },
            schedule: LrSchedule::Poly { power: 0.9, min_lr: 1e-4 },
            checkpoint_every: 8_000,
            log_every: 50,
        }
    }

    /// Reduced encoder for a workstation CPU: batch 8, 5K iterations, AdamW.
    pub fn desk() -> Self {
        ModelConfig {
            backbone: "desk".into(),
            net: NetConfig::desk(),
            iterations: 5_000,
            batch_size: 8,
            optimizer: OptimizerConfig::AdamW { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 },
            schedule: LrSchedule::Constant,
            checkpoint_every: 1_000,
            log_every: 25,
            ..Self::full()
        }
    }

    /// Minutes-scale network for 64-pixel synthetic scenes.
    pub fn toy() -> Self {
        ModelConfig {
            backbone: "toy".into(),
            net: NetConfig::toy(),
            iterations: 800,
            optimizer: OptimizerConfig::AdamW { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 },
            schedule: LrSchedule::Poly { power: 0.9, min_lr: 1e-5 },
            checkpoint_every: 0,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" | "resnet34" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.in_channels != IN_CHANNELS || self.out_classes != OUT_CLASSES {
            return Err(TrainError::Config(format!(
                "the network takes {IN_CHANNELS} input channels and predicts {OUT_CLASSES} classes, config says {} and {}",
                self.in_channels, self.out_classes
            )));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("iterations and batch_size must be positive".into()));
        }
        if self.net.low_level_stage >= self.net.stages.len() {
            return Err(TrainError::Config("low_level_stage is past the last stage".into()));
        }
        Ok(())
    }
}

struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn step(&mut self, grads: &GradStore) -> candle_core::Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = if self.weight_decay > 0.0 { (g + var.as_tensor().affine(self.weight_decay, 0.0)?)? } else { g.clone() };
            let v = match vel.take() {
                Some(prev) => (prev.affine(self.momentum, 0.0)? + g)?,
                None => g,
            };
            var.set(&(var.as_tensor() - v.affine(self.lr, 0.0)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

enum Optim {
    AdamW(AdamW),
    Sgd(Sgd),
}

impl Optim {
    fn new(cfg: &OptimizerConfig, vars: Vec<Var>) -> candle_core::Result<Self> {
        Ok(match *cfg {
            OptimizerConfig::AdamW { lr, beta1, beta2, eps, weight_decay } => {
                Optim::AdamW(AdamW::new(vars, ParamsAdamW { lr, beta1, beta2, eps, weight_decay })?)
            }
            OptimizerConfig::Sgd { lr, momentum, weight_decay } => {
                let velocity = vec![None; vars.len()];
                Optim::Sgd(Sgd { vars, velocity, lr, momentum, weight_decay })
            }
        })
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            Optim::AdamW(o) => o.set_learning_rate(lr),
            Optim::Sgd(o) => o.lr = lr,
        }
    }

    fn step(&mut self, grads: &GradStore) -> candle_core::Result<()> {
        match self {
            Optim::AdamW(o) => o.step(grads),
            Optim::Sgd(o) => o.step(grads),
        }
    }
}

/// Stacked tensors of one batch.
pub struct Batch {
    /// `(B, 5, S, S)`
    pub inputs: Tensor,
    /// `(B, S, S)` of 0/1.
    pub target: Tensor,
    /// `(B, S, S)` of 0/1.
    pub valid: Tensor,
    pub instance_ids: Vec<String>,
}

impl Batch {
    pub fn from_examples(examples: &[TrainingExample], device: &Device) -> Result<Self, TrainError> {
        let first = examples.first().ok_or(TrainError::EmptyBatch)?;
        let (c, h, w) = first.channels.dim();
        if examples.iter().any(|e| e.channels.dim() != (c, h, w) || e.target.dim() != (h, w)) {
            return Err(TrainError::RaggedBatch);
        }
        let b = examples.len();
        let mut inputs = Vec::with_capacity(b * c * h * w);
        let mut target = Vec::with_capacity(b * h * w);
        let mut valid = Vec::with_capacity(b * h * w);
        for e in examples {
            inputs.extend(e.channels.iter().copied());
            target.extend(e.target.iter().map(|&t| t as u8 as f32));
            valid.extend(e.valid.iter().map(|&v| v as u8 as f32));
        }
        Ok(Batch {
            inputs: Tensor::from_vec(inputs, (b, c, h, w), device)?,
            target: Tensor::from_vec(target, (b, h, w), device)?,
            valid: Tensor::from_vec(valid, (b, h, w), device)?,
            instance_ids: examples.iter().map(|e| e.instance_id.clone()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
    pub non_finite: usize,
}

/// Written when training hits a non-finite loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    pub instance_ids: Vec<String>,
    pub channels: Vec<ChannelStats>,
    pub non_finite_params: Vec<String>,
}

fn channel_stats(inputs: &Tensor) -> candle_core::Result<Vec<ChannelStats>> {
    let c = inputs.dim(1)?;
    (0..c)
        .map(|i| {
            let v = inputs.narrow(1, i, 1)?.flatten_all()?.to_vec1::<f32>()?;
            let finite: Vec<f32> = v.iter().copied().filter(|x| x.is_finite()).collect();
            Ok(ChannelStats {
                min: finite.iter().copied().fold(f32::INFINITY, f32::min),
                max: finite.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                mean: finite.iter().sum::<f32>() / finite.len().max(1) as f32,
                non_finite: v.len() - finite.len(),
            })
        })
        .collect()
}

/// Owns a network and its optimizer state.
pub struct Trainer {
    net: SegNet,
    cfg: ModelConfig,
    optim: Optim,
    step: usize,
    losses: Vec<f32>,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, device: &Device) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net = SegNet::new(cfg.net.clone(), cfg.seed, DType::F32, device)?;
        let optim = Optim::new(&cfg.optimizer, net.params().vars())?;
        Ok(Trainer { net, cfg, optim, step: 0, losses: Vec::new() })
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    pub fn into_net(self) -> SegNet {
        self.net
    }

    pub fn losses(&self) -> &[f32] {
        &self.losses
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.cfg.schedule.at(self.cfg.optimizer.base_lr(), self.step, self.cfg.iterations)
    }

    /// One optimizer step on `examples`; returns the loss before the update.
    pub fn step(&mut self, examples: &[TrainingExample]) -> Result<f32, TrainError> {
        let batch = Batch::from_examples(examples, self.net.params().device())?;
        debug_assert_eq!(batch.inputs.dim(1)?, CHANNELS);
        let logits = self.net.forward(&batch.inputs)?;
        let loss = masked_cross_entropy(&logits, &batch.target, &batch.valid)?;
        let value = loss.to_scalar::<f32>()?;
        let lr = self.lr();
        if !value.is_finite() {
            let non_finite_params = self
                .net
                .params()
                .named()
                .filter(|(_, v)| {
                    v.as_tensor()
                        .flatten_all()
                        .and_then(|t| t.to_vec1::<f32>())
                        .map(|x| x.iter().any(|f| !f.is_finite()))
                        .unwrap_or(true)
                })
                .map(|(n, _)| n.to_string())
                .collect();
            let diagnostics = Diagnostics {
                step: self.step,
                loss: value,
                lr,
                instance_ids: batch.instance_ids,
                channels: channel_stats(&batch.inputs)?,
                non_finite_params,
            };
            return Err(TrainError::NonFinite { step: self.step, loss: value, diagnostics: Box::new(diagnostics), bundle: None });
        }
        self.optim.set_lr(lr);
        let grads = loss.backward()?;
        self.optim.step(&grads)?;
        self.step += 1;
        self.losses.push(value);
        Ok(value)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f32>,
    /// Files written, intermediate checkpoints first.
    pub saved: Vec<PathBuf>,
}

/// Run `cfg.iterations` steps over `batches`, writing checkpoints, a loss
/// curve and (on failure) a diagnostics bundle under `out_dir`.
pub fn train<I>(
    cfg: &ModelConfig,
    mut batches: I,
    out_dir: Option<&Path>,
    mut manifest: TrainingManifest,
    device: &Device,
) -> Result<TrainOutcome, TrainError>
where
    I: Iterator<Item = Result<Vec<TrainingExample>, DatasetError>>,
{
    let mut trainer = Trainer::new(cfg.clone(), device)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    manifest.model = cfg.clone();
    let mut saved = Vec::new();
    while trainer.steps_done() < cfg.iterations {
        let examples = batches.next().ok_or_else(|| TrainError::Config("batch stream ended early".into()))??;
        match trainer.step(&examples) {
            Ok(loss) => {
                let step = trainer.steps_done();
                if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
                    tracing::info!(step, loss, lr = trainer.lr(), "train");
                }
                if let (Some(dir), true) = (out_dir, cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.iterations) {
                    manifest.iteration = step;
                    let stem = dir.join(format!("ckpt_{step:06}"));
                    Checkpoint::save_parts(trainer.net(), &manifest, &stem)?;
                    saved.push(stem.with_extension("safetensors"));
                }
            }
            Err(TrainError::NonFinite { step, loss, diagnostics, .. }) => {
                let bundle = match out_dir {
                    Some(dir) => {
                        let path = dir.join(format!("diagnostics_step{step:06}.json"));
                        std::fs::write(&path, serde_json::to_vec_pretty(&diagnostics).expect("diagnostics serialize"))?;
                        Some(path)
                    }
                    None => None,
                };
                tracing::error!(step, loss, "non-finite loss, aborting");
                return Err(TrainError::NonFinite { step, loss, diagnostics, bundle });
            }
            Err(e) => return Err(e),
        }
    }
    manifest.iteration = trainer.steps_done();
    let losses = trainer.losses().to_vec();
    let checkpoint = Checkpoint { net: trainer.into_net(), manifest };
    if let Some(dir) = out_dir {
        let stem = dir.join("final");
        checkpoint.save(&stem)?;
        saved.push(stem.with_extension("safetensors"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("losses.csv"))?);
        writeln!(f, "step,loss")?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(f, "{},{l}", i + 1)?;
        }
    }
    Ok(TrainOutcome { checkpoint, losses, saved })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::full(), ModelConfig::desk(), ModelConfig::toy()] {
            cfg.validate().unwrap();
        }
        let bad = ModelConfig { in_channels: 3, ..ModelConfig::toy() };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = ModelConfig { out_classes: 21, ..ModelConfig::toy() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn poly_schedule_endpoints() {
        let s = LrSchedule::Poly { power: 0.9, min_lr: 1e-4 };
        assert_eq!(s.at(0.01, 0, 100), 0.01);
        assert!((s.at(0.01, 100, 100) - 1e-4).abs() < 1e-15);
        let mid = s.at(0.01, 50, 100);
        assert!((mid - ((0.01 - 1e-4) * 0.5f64.powf(0.9) + 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let dev = Device::Cpu;
        let w = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &dev).unwrap()).unwrap();
        let mut opt = Sgd { vars: vec![w.clone()], velocity: vec![None], lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
        // loss = sum(w^2) / 2, gradient w.
        for _ in 0..2 {
            let loss = (w.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        // Hand computation for the first coordinate.
        let (mut x, mut v) = (1.0f64, 0.0f64);
        for k in 0..2 {
            let g = x + 0.01 * x;
            v = if k == 0 { g } else { 0.9 * v + g };
            x -= 0.1 * v;
        }
        let got = w.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((got - x).abs() < 1e-12, "{got} vs {x}");
    }
}
