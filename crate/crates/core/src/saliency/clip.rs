//! CLIP dual encoder with a dense patch readout.
//!
//! Weight names follow the Hugging Face `CLIPModel` safetensors layout
//! (`vision_model.*`, `text_model.*`, `visual_projection`, `text_projection`).
//! The dense readout skips attention pooling in the last vision block: each
//! patch token goes through the block's value and output projections, the
//! residual and the MLP, then the post layer norm and the visual projection.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use candle_core::{DType, Device, IndexOp, Module, Tensor, D};
use candle_nn::{layer_norm, linear, linear_no_bias, Conv2dConfig, LayerNorm, LayerNormConfig, Linear, VarBuilder};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::{ClipTokenizer, CONTEXT_LENGTH};
use super::{check_text, Capabilities, DeviceKind, SaliencyBackend, SaliencyError, SaliencyMap};
use crate::data::LoadedImage;
use crate::geometry::{resize_bilinear, Letterbox};

pub(crate) const DEFAULT_REGISTRY: &str = "weights/registry.json";
const MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub patch: usize,
    pub image_size: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig { hidden: 768, layers: 12, heads: 12, intermediate: 3072, patch: 16, image_size: 224 }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { vocab: 49408, hidden: 512, layers: 12, heads: 8, intermediate: 2048, max_positions: CONTEXT_LENGTH }
    }
}

/// Defaults are ViT-B/16.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub projection: Option<usize>,
}

impl ClipConfig {
    pub fn projection_dim(&self) -> usize {
        self.projection.unwrap_or(512)
    }

    /// A very small model for tests and demos with random weights.
    pub fn tiny(vocab: usize) -> Self {
        ClipConfig {
            vision: VisionConfig { hidden: 32, layers: 2, heads: 2, intermediate: 64, patch: 8, image_size: 32 },
            text: TextConfig { vocab, hidden: 32, layers: 2, heads: 2, intermediate: 64, max_positions: 16 },
            projection: Some(16),
        }
    }
}

/// How dense features are read out of the last vision block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Value path plus residual and MLP.
    #[default]
    ValueResidualMlp,
    /// Value and output projections only.
    ValueOnly,
}

fn quick_gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x * candle_nn::ops::sigmoid(&(x * 1.702)?)?
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(hidden: usize, heads: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Attention {
            q: linear(hidden, hidden, vb.pp("q_proj"))?,
            k: linear(hidden, hidden, vb.pp("k_proj"))?,
            v: linear(hidden, hidden, vb.pp("v_proj"))?,
            out: linear(hidden, hidden, vb.pp("out_proj"))?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let split = |t: Tensor| t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous();
        let q = split((self.q.forward(x)? * (hd as f64).powf(-0.5))?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut att = q.matmul(&k.t()?)?;
        if let Some(m) = mask {
            att = att.broadcast_add(m)?;
        }
        let att = candle_nn::ops::softmax_last_dim(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.out.forward(&y)
    }

    fn value_path(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.out.forward(&self.v.forward(x)?)
    }
}

struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(hidden: usize, heads: usize, inter: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let ln = LayerNormConfig { eps: 1e-5, ..Default::default() };
        Ok(Block {
            ln1: layer_norm(hidden, ln, vb.pp("layer_norm1"))?,
            attn: Attention::new(hidden, heads, vb.pp("self_attn"))?,
            ln2: layer_norm(hidden, ln, vb.pp("layer_norm2"))?,
            fc1: linear(hidden, inter, vb.pp("mlp").pp("fc1"))?,
            fc2: linear(inter, hidden, vb.pp("mlp").pp("fc2"))?,
        })
    }

    fn mlp(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&quick_gelu(&self.fc1.forward(x)?)?)
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        &x + self.mlp(&self.ln2.forward(&x)?)?
    }

    fn dense(&self, x: &Tensor, readout: Readout) -> candle_core::Result<Tensor> {
        let v = self.attn.value_path(&self.ln1.forward(x)?)?;
        match readout {
            Readout::ValueOnly => Ok(v),
            Readout::ValueResidualMlp => {
                let v = (x + v)?;
                &v + self.mlp(&self.ln2.forward(&v)?)?
            }
        }
    }
}

pub struct ClipModel {
    cfg: ClipConfig,
    patch: candle_nn::Conv2d,
    class_embedding: Tensor,
    vision_pos: Tensor,
    pre_ln: LayerNorm,
    vision_blocks: Vec<Block>,
    post_ln: LayerNorm,
    visual_projection: Linear,
    token_embedding: candle_nn::Embedding,
    text_pos: Tensor,
    text_blocks: Vec<Block>,
    final_ln: LayerNorm,
    text_projection: Linear,
    device: Device,
}

impl ClipModel {
    pub fn new(cfg: ClipConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let v = &cfg.vision;
        let t = &cfg.text;
        let proj = cfg.projection_dim();
        let ln = LayerNormConfig { eps: 1e-5, ..Default::default() };
        let init = candle_nn::Init::Randn { mean: 0.0, stdev: 0.02 };
        let vv = vb.pp("vision_model");
        let emb = vv.pp("embeddings");
        let conv_cfg = Conv2dConfig { stride: v.patch, ..Default::default() };
        let n_patches = v.grid() * v.grid();
        let tv = vb.pp("text_model");
        Ok(ClipModel {
            patch: candle_nn::conv2d_no_bias(3, v.hidden, v.patch, conv_cfg, emb.pp("patch_embedding"))?,
            class_embedding: emb.get_with_hints(v.hidden, "class_embedding", init)?,
            vision_pos: emb.pp("position_embedding").get_with_hints((n_patches + 1, v.hidden), "weight", init)?,
            pre_ln: layer_norm(v.hidden, ln, vv.pp("pre_layrnorm"))?,
            vision_blocks: (0..v.layers)
                .map(|i| Block::new(v.hidden, v.heads, v.intermediate, vv.pp("encoder.layers").pp(i)))
                .collect::<candle_core::Result<_>>()?,
            post_ln: layer_norm(v.hidden, ln, vv.pp("post_layernorm"))?,
            visual_projection: linear_no_bias(v.hidden, proj, vb.pp("visual_projection"))?,
            token_embedding: candle_nn::embedding(t.vocab, t.hidden, tv.pp("embeddings.token_embedding"))?,
            text_pos: tv.pp("embeddings.position_embedding").get_with_hints((t.max_positions, t.hidden), "weight", init)?,
            text_blocks: (0..t.layers)
                .map(|i| Block::new(t.hidden, t.heads, t.intermediate, tv.pp("encoder.layers").pp(i)))
                .collect::<candle_core::Result<_>>()?,
            final_ln: layer_norm(t.hidden, ln, tv.pp("final_layer_norm"))?,
            text_projection: linear_no_bias(t.hidden, proj, vb.pp("text_projection"))?,
            device: vb.device().clone(),
            cfg,
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.cfg
    }

    /// Unit-norm dense features `(grid*grid, proj)` for a normalized
    /// `(1, 3, S, S)` image tensor.
    pub fn dense_image_features(&self, pixels: &Tensor, readout: Readout) -> candle_core::Result<Tensor> {
        let x = self.patch.forward(pixels)?; // (1, hidden, g, g)
        let (b, c, _, _) = x.dims4()?;
        let x = x.flatten_from(2)?.transpose(1, 2)?; // (1, g*g, hidden)
        let cls = self.class_embedding.reshape((1, 1, c))?.broadcast_as((b, 1, c))?;
        let x = Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.vision_pos.unsqueeze(0)?)?;
        let mut x = self.pre_ln.forward(&x)?;
        let (last, body) = self.vision_blocks.split_last().expect("at least one block");
        for block in body {
            x = block.forward(&x, None)?;
        }
        let dense = last.dense(&x, readout)?;
        let dense = self.post_ln.forward(&dense)?;
        let feats = self.visual_projection.forward(&dense)?.i((0, 1..))?;
        l2_normalize(&feats)
    }

    /// Unit-norm text embedding for padded token ids with the end marker at `eos`.
    pub fn text_features(&self, ids: &[u32], eos: usize) -> candle_core::Result<Tensor> {
        let n = ids.len();
        let ids = Tensor::new(ids, &self.device)?.unsqueeze(0)?;
        let x = self.token_embedding.forward(&ids)?;
        let mut x = x.broadcast_add(&self.text_pos.i(..n)?.unsqueeze(0)?)?;
        let mask: Vec<f32> =
            (0..n).flat_map(|i| (0..n).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 })).collect();
        let mask = Tensor::from_vec(mask, (1, 1, n, n), &self.device)?;
        for block in &self.text_blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        let x = self.final_ln.forward(&x)?;
        let pooled = self.text_projection.forward(&x.i((.., eos, ..))?)?;
        l2_normalize(&pooled.squeeze(0)?)
    }
}

fn l2_normalize(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    x.broadcast_div(&norm.clamp(1e-12, f64::MAX)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskClipOptions {
    pub template: String,
    pub readout: Readout,
    /// Softmax over pixels instead of raw cosine scores.
    pub spatial_softmax: bool,
    pub softmax_temperature: f32,
}

impl Default for MaskClipOptions {
    fn default() -> Self {
        MaskClipOptions {
            template: "a photo of a {}".into(),
            readout: Readout::ValueResidualMlp,
            spatial_softmax: false,
            softmax_temperature: 0.01,
        }
    }
}

/// One entry of the weights registry (JSON). Relative paths resolve
/// against the registry file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub weights: PathBuf,
    pub merges: PathBuf,
    #[serde(default)]
    pub sha256: Option<String>,
    #[serde(default)]
    pub config: ClipConfig,
    #[serde(default)]
    pub options: MaskClipOptions,
}

const INSTRUCTIONS: &str = "Download `model.safetensors` and `merges.txt` of openai/clip-vit-base-patch16 from \
the Hugging Face hub into the registry directory (e.g. `huggingface-cli download openai/clip-vit-base-patch16 \
model.safetensors merges.txt --local-dir weights/clip-vit-base-patch16`) and point a registry entry at them.";

fn sha256_file(path: &Path) -> Result<String, SaliencyError> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

pub struct MaskClipBackend {
    id: String,
    model: ClipModel,
    tokenizer: ClipTokenizer,
    options: MaskClipOptions,
    /// Serializes forward passes; the backend owns its device state.
    gate: Mutex<()>,
}

impl MaskClipBackend {
    pub fn new(model: ClipModel, tokenizer: ClipTokenizer, options: MaskClipOptions) -> Self {
        MaskClipBackend { id: "maskclip".into(), model, tokenizer, options, gate: Mutex::new(()) }
    }

    pub fn from_entry(entry: &RegistryEntry, base: &Path) -> Result<Self, SaliencyError> {
        let weights = base.join(&entry.weights);
        let merges = base.join(&entry.merges);
        for path in [&weights, &merges] {
            if !path.exists() {
                return Err(SaliencyError::WeightsUnavailable {
                    backend: entry.name.clone(),
                    path: path.display().to_string(),
                    reason: "file not found".into(),
                    instructions: INSTRUCTIONS.into(),
                });
            }
        }
        if let Some(expected) = &entry.sha256 {
            let actual = sha256_file(&weights)?;
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(SaliencyError::Checksum {
                    path: weights.display().to_string(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        let device = Device::Cpu;
        // SAFETY: the file is only read through the mapping and not modified while loaded.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[&weights], DType::F32, &device)? };
        let model = ClipModel::new(entry.config.clone(), vb)?;
        let tokenizer = ClipTokenizer::from_merges_file(&merges)?;
        Ok(Self::new(model, tokenizer, entry.options.clone()))
    }

    /// Load the entry named `name` (or the first) from a registry file.
    pub fn from_registry(path: &Path, name: Option<&str>) -> Result<Self, SaliencyError> {
        let text = std::fs::read_to_string(path).map_err(|e| SaliencyError::WeightsUnavailable {
            backend: "maskclip".into(),
            path: path.display().to_string(),
            reason: format!("registry unreadable: {e}"),
            instructions: INSTRUCTIONS.into(),
        })?;
        let entries: Vec<RegistryEntry> =
            serde_json::from_str(&text).map_err(|e| SaliencyError::Registry(e.to_string()))?;
        let entry = match name {
            Some(n) => entries.iter().find(|e| e.name == n),
            None => entries.first(),
        }
        .ok_or_else(|| SaliencyError::Registry(format!("no entry {name:?} in {}", path.display())))?;
        Self::from_entry(entry, path.parent().unwrap_or(Path::new(".")))
    }

    fn image_tensor(&self, image: &LoadedImage, lb: &Letterbox) -> candle_core::Result<Tensor> {
        let side = lb.side;
        let mut data = vec![0f32; 3 * side * side];
        for c in 0..3 {
            let channel = Array2::from_shape_fn(image.shape(), |(y, x)| {
                image.pixels.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            });
            // Pad with the mean color, which normalizes to zero.
            let boxed = lb.apply_f32(channel.view(), MEAN[c]);
            for (dst, v) in data[c * side * side..(c + 1) * side * side].iter_mut().zip(boxed.iter()) {
                *dst = (v - MEAN[c]) / STD[c];
            }
        }
        Tensor::from_vec(data, (1, 3, side, side), &self.model.device)
    }
}

impl SaliencyBackend for MaskClipBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { batching: false, device: DeviceKind::Cpu }
    }

    fn compute(&self, image: &LoadedImage, text: &str) -> Result<SaliencyMap, SaliencyError> {
        let text = check_text(text)?;
        let embedding = Tensor::new(self.embed_text(text)?, &self.model.device)?;
        let (h, w) = image.shape();
        let side = self.model.cfg.vision.image_size;
        let lb = Letterbox::new(h, w, side);
        let _gate = self.gate.lock().expect("backend gate");
        let feats = self.model.dense_image_features(&self.image_tensor(image, &lb)?, self.options.readout)?;
        let scores = feats.matmul(&embedding.unsqueeze(1)?)?.squeeze(1)?;
        let g = self.model.cfg.vision.grid();
        let scores = if self.options.spatial_softmax {
            candle_nn::ops::softmax_last_dim(&(scores / self.options.softmax_temperature as f64)?)?
        } else {
            scores
        };
        let grid = Array2::from_shape_vec((g, g), scores.to_vec1::<f32>()?).expect("grid shape");
        let square = resize_bilinear(grid.view(), (side, side));
        SaliencyMap::new(lb.invert_f32(square.view()), text, self.id())
    }

    fn embed_text(&self, phrase: &str) -> Result<Vec<f32>, SaliencyError> {
        let phrase = check_text(phrase)?;
        let prompt = self.options.template.replace("{}", phrase);
        let context = self.model.cfg.text.max_positions;
        let (ids, eos) = self.tokenizer.encode_padded(&prompt, context)?;
        let _gate = self.gate.lock().expect("backend gate");
        Ok(self.model.text_features(&ids, eos)?.to_vec1::<f32>()?)
    }
}
