//! Encoder-decoder segmentation network: a residual encoder with atrous
//! spatial pyramid pooling, a decoder that fuses one low-level feature map,
//! and a per-pixel 2-class head, in the DeepLabV3+ layout.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::conv::{conv2d, ConvGeom};
use super::params::{Init, ParamStore};
use crate::geometry::bilinear_matrix;

pub const IN_CHANNELS: usize = 5;
pub const OUT_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    /// Index of the stage whose output feeds the decoder.
    pub low_level_stage: usize,
    pub low_level_channels: usize,
    pub aspp_channels: usize,
    pub aspp_dilations: Vec<usize>,
    pub decoder_channels: usize,
    /// Group-norm groups (clamped to divide each layer's width).
    pub groups: usize,
}

fn stage(channels: usize, blocks: usize, stride: usize, dilation: usize) -> StageConfig {
    StageConfig { channels, blocks, stride, dilation }
}

impl NetConfig {
    /// ResNet-34 layout, output stride 16.
    pub fn resnet34() -> Self {
        NetConfig {
            stem_channels: 64,
            stem_stride: 2,
            stages: vec![stage(64, 3, 2, 1), stage(128, 4, 2, 1), stage(256, 6, 2, 1), stage(512, 3, 1, 2)],
            low_level_stage: 0,
            low_level_channels: 48,
            aspp_channels: 256,
            aspp_dilations: vec![6, 12, 18],
            decoder_channels: 256,
            groups: 32,
        }
    }

    /// One block per stage, narrow widths; output stride 16.
    pub fn desk() -> Self {
        NetConfig {
            stem_channels: 24,
            stem_stride: 2,
            stages: vec![stage(32, 1, 2, 1), stage(64, 1, 2, 1), stage(128, 1, 2, 1), stage(128, 1, 1, 2)],
            low_level_stage: 0,
            low_level_channels: 16,
            aspp_channels: 64,
            aspp_dilations: vec![2, 4, 6],
            decoder_channels: 32,
            groups: 8,
        }
    }

    /// Small enough to train on a single CPU core in minutes; output stride 4.
    pub fn toy() -> Self {
        NetConfig {
            stem_channels: 16,
            stem_stride: 2,
            stages: vec![stage(16, 1, 1, 1), stage(32, 1, 2, 1), stage(32, 1, 1, 2)],
            low_level_stage: 0,
            low_level_channels: 8,
            aspp_channels: 32,
            aspp_dilations: vec![2, 4],
            decoder_channels: 24,
            groups: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("network expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("network expects a (batch, channels, height, width) input, got {0:?}")]
    Rank(Vec<usize>),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    geom: ConvGeom,
}

impl Conv {
    fn new(p: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeom, bias: bool) -> candle_core::Result<Self> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = p.param(&format!("{name}.weight"), &[cout, cin, k, k], Init::Normal(std))?;
        let bias = if bias { Some(p.param(&format!("{name}.bias"), &[cout], Init::Const(0.0))?) } else { None };
        Ok(Conv { weight, bias, geom })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.geom)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

struct Norm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl Norm {
    fn new(p: &mut ParamStore, name: &str, channels: usize, groups: usize) -> candle_core::Result<Self> {
        let mut g = groups.min(channels).max(1);
        while channels % g != 0 {
            g -= 1;
        }
        Ok(Norm {
            gamma: p.param(&format!("{name}.weight"), &[channels], Init::Const(1.0))?,
            beta: p.param(&format!("{name}.bias"), &[channels], Init::Const(0.0))?,
            groups: g,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xg = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        normed.broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?.broadcast_add(&self.beta.reshape((1, c, 1, 1))?)
    }
}

/// Conv → group norm → optional ReLU.
struct Cnr {
    conv: Conv,
    norm: Norm,
    relu: bool,
}

impl Cnr {
    #[allow(clippy::too_many_arguments)]
    fn new(p: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeom, groups: usize, relu: bool) -> candle_core::Result<Self> {
        Ok(Cnr {
            conv: Conv::new(p, &format!("{name}.conv"), cin, cout, k, geom, false)?,
            norm: Norm::new(p, &format!("{name}.norm"), cout, groups)?,
            relu,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?)?;
        if self.relu {
            y.relu()
        } else {
            Ok(y)
        }
    }
}

struct ResBlock {
    a: Cnr,
    b: Cnr,
    shortcut: Option<Cnr>,
}

impl ResBlock {
    fn new(p: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize, groups: usize) -> candle_core::Result<Self> {
        let first = if stride > 1 { ConvGeom::strided(3, stride) } else { ConvGeom::same(3, dilation) };
        let shortcut = if stride != 1 || cin != cout {
            let g = ConvGeom { stride, padding: 0, dilation: 1 };
            Some(Cnr::new(p, &format!("{name}.shortcut"), cin, cout, 1, g, groups, false)?)
        } else {
            None
        };
        Ok(ResBlock {
            a: Cnr::new(p, &format!("{name}.a"), cin, cout, 3, first, groups, true)?,
            b: Cnr::new(p, &format!("{name}.b"), cout, cout, 3, ConvGeom::same(3, dilation), groups, false)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.b.forward(&self.a.forward(x)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        (y + skip)?.relu()
    }
}

/// Bilinear resize of `(B, C, h, w)` to `(B, C, H, W)` as two matmuls, so it
/// is differentiable.
pub fn upsample_bilinear(x: &Tensor, (oh, ow): (usize, usize)) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let to = |m: ndarray::Array2<f32>| -> candle_core::Result<Tensor> {
        let (r, k) = m.dim();
        Tensor::from_vec(m.into_raw_vec_and_offset().0, (r, k), x.device())?.to_dtype(x.dtype())
    };
    let mw = to(bilinear_matrix(w, ow))?.t()?; // (w, ow)
    let mh = to(bilinear_matrix(h, oh))?; // (oh, h)
    // Batched per-plane products keep every batch item bit-identical to a
    // batch of one. The broadcast operands are materialized because candle's
    // batched matmul mishandles stride-0 batch dimensions.
    let y = x.reshape((b * c, h, w))?.matmul(&mw.broadcast_left(b * c)?.contiguous()?)?; // (bc, h, ow)
    let y = mh.broadcast_left(b * c)?.contiguous()?.matmul(&y)?; // (bc, oh, ow)
    y.reshape((b, c, oh, ow))
}

pub struct SegNet {
    cfg: NetConfig,
    stem: Cnr,
    stages: Vec<Vec<ResBlock>>,
    aspp_branches: Vec<Cnr>,
    aspp_pool: Conv,
    aspp_project: Cnr,
    low_level: Cnr,
    fuse: Cnr,
    classifier: Conv,
    params: ParamStore,
}

impl SegNet {
    pub fn new(cfg: NetConfig, seed: u64, dtype: DType, device: &Device) -> candle_core::Result<Self> {
        let mut p = ParamStore::new(seed, dtype, device.clone());
        let g = cfg.groups;
        let stem = Cnr::new(&mut p, "stem", IN_CHANNELS, cfg.stem_channels, 3, ConvGeom::strided(3, cfg.stem_stride), g, true)?;
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::new();
        for (si, s) in cfg.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..s.blocks {
                let stride = if bi == 0 { s.stride } else { 1 };
                blocks.push(ResBlock::new(&mut p, &format!("stage{si}.{bi}"), cin, s.channels, stride, s.dilation, g)?);
                cin = s.channels;
            }
            stages.push(blocks);
        }
        let a = cfg.aspp_channels;
        let mut aspp_branches = vec![Cnr::new(&mut p, "aspp.b0", cin, a, 1, ConvGeom::same(1, 1), g, true)?];
        for (i, &d) in cfg.aspp_dilations.iter().enumerate() {
            aspp_branches.push(Cnr::new(&mut p, &format!("aspp.b{}", i + 1), cin, a, 3, ConvGeom::same(3, d), g, true)?);
        }
        let aspp_pool = Conv::new(&mut p, "aspp.pool", cin, a, 1, ConvGeom::same(1, 1), true)?;
        let n_branches = aspp_branches.len() + 1;
        let aspp_project = Cnr::new(&mut p, "aspp.project", a * n_branches, a, 1, ConvGeom::same(1, 1), g, true)?;
        let low_in = cfg.stages[cfg.low_level_stage].channels;
        let low_level = Cnr::new(&mut p, "decoder.low", low_in, cfg.low_level_channels, 1, ConvGeom::same(1, 1), g, true)?;
        let fuse = Cnr::new(&mut p, "decoder.fuse", a + cfg.low_level_channels, cfg.decoder_channels, 3, ConvGeom::same(3, 1), g, true)?;
        let classifier = Conv::new(&mut p, "classifier", cfg.decoder_channels, OUT_CLASSES, 1, ConvGeom::same(1, 1), true)?;
        Ok(SegNet { cfg, stem, stages, aspp_branches, aspp_pool, aspp_project, low_level, fuse, classifier, params: p })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(B, 5, H, W)` → `(B, 2, H, W)` class logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let dims = x.dims();
        if dims.len() != 4 {
            return Err(NetError::Rank(dims.to_vec()));
        }
        if dims[1] != IN_CHANNELS {
            return Err(NetError::ChannelMismatch { expected: IN_CHANNELS, got: dims[1] });
        }
        let (h, w) = (dims[2], dims[3]);
        let mut y = self.stem.forward(x)?;
        let mut low = None;
        for (si, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                y = b.forward(&y)?;
            }
            if si == self.cfg.low_level_stage {
                low = Some(y.clone());
            }
        }
        let (fh, fw) = (y.dim(2)?, y.dim(3)?);
        let mut branches = self.aspp_branches.iter().map(|b| b.forward(&y)).collect::<candle_core::Result<Vec<_>>>()?;
        let pooled = self.aspp_pool.forward(&y.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)?.relu()?;
        branches.push(pooled.broadcast_as((pooled.dim(0)?, pooled.dim(1)?, fh, fw))?.contiguous()?);
        let aspp = self.aspp_project.forward(&Tensor::cat(&branches, 1)?)?;
        let low = self.low_level.forward(&low.expect("low-level stage exists"))?;
        let (lh, lw) = (low.dim(2)?, low.dim(3)?);
        let fused = self.fuse.forward(&Tensor::cat(&[&upsample_bilinear(&aspp, (lh, lw))?, &low], 1)?)?;
        let logits = self.classifier.forward(&fused)?;
        Ok(upsample_bilinear(&logits, (h, w))?)
    }

    /// Foreground probability `(B, H, W)`.
    pub fn foreground_probability(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let logits = self.forward(x)?;
        Ok(candle_nn::ops::softmax(&logits, 1)?.narrow(1, 1, 1)?.squeeze(1)?)
    }
}

/// Mean 2-class cross-entropy over pixels where `valid` is 1.
/// `logits: (B, 2, H, W)`, `target` and `valid`: `(B, H, W)` of 0/1 values.
pub fn masked_cross_entropy(logits: &Tensor, target: &Tensor, valid: &Tensor) -> candle_core::Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let bg = logp.narrow(1, 0, 1)?.squeeze(1)?;
    let fg = logp.narrow(1, 1, 1)?.squeeze(1)?;
    let one_minus = target.affine(-1.0, 1.0)?;
    let nll = ((target * fg)? + (one_minus * bg)?)?.neg()?;
    let count = valid.sum_all()?.clamp(1.0, f64::MAX)?;
    (nll * valid)?.sum_all()?.div(&count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SegNet {
        SegNet::new(NetConfig::toy(), 3, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn shape_contract() {
        let net = tiny();
        let x = Tensor::randn(0f32, 1.0, (2, 5, 32, 48), &Device::Cpu).unwrap();
        let logits = net.forward(&x).unwrap();
        assert_eq!(logits.dims(), &[2, 2, 32, 48]);
        let p = net.foreground_probability(&x).unwrap();
        assert_eq!(p.dims(), &[2, 32, 48]);
        let v = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&q| (0.0..=1.0).contains(&q)));
        for c in [3, 4, 6] {
            let bad = Tensor::zeros((1, c, 32, 32), DType::F32, &Device::Cpu).unwrap();
            assert!(matches!(net.forward(&bad), Err(NetError::ChannelMismatch { got, .. }) if got == c));
        }
    }

    #[test]
    fn batch_items_are_independent() {
        let net = tiny();
        let one = Tensor::randn(0f32, 1.0, (1, 5, 32, 32), &Device::Cpu).unwrap();
        let other = Tensor::randn(0f32, 1.0, (1, 5, 32, 32), &Device::Cpu).unwrap();
        let pair = net.foreground_probability(&Tensor::cat(&[&one, &one], 0).unwrap()).unwrap();
        let a = pair.get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = pair.get(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let mixed = net.foreground_probability(&Tensor::cat(&[&one, &other], 0).unwrap()).unwrap();
        let c = mixed.get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (p, q) in a.iter().zip(&c) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let x = Tensor::randn(0f32, 1.0, (1, 5, 16, 16), &Device::Cpu).unwrap();
        let a = tiny().forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = tiny().forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let other = SegNet::new(NetConfig::toy(), 4, DType::F32, &Device::Cpu).unwrap();
        assert_ne!(a, other.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::zeros((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let t = Tensor::ones((1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let loss = masked_cross_entropy(&logits, &t, &t).unwrap().to_scalar::<f32>().unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn invalid_pixels_do_not_count() {
        let dev = Device::Cpu;
        let logits = Tensor::from_vec(vec![0f32, 0.0, 5.0, -5.0], (1, 2, 1, 2), &dev).unwrap();
        let target = Tensor::from_vec(vec![1f32, 1.0], (1, 1, 2), &dev).unwrap();
        let only_first = Tensor::from_vec(vec![1f32, 0.0], (1, 1, 2), &dev).unwrap();
        let loss = masked_cross_entropy(&logits, &target, &only_first).unwrap().to_scalar::<f32>().unwrap();
        // First pixel: logits (bg=0, fg=5) -> -ln softmax_fg.
        let expect = -(5f32.exp() / (1.0 + 5f32.exp())).ln();
        assert!((loss - expect).abs() < 1e-5);
    }

    #[test]
    fn upsample_matches_ndarray_resize() {
        let dev = Device::Cpu;
        let a = ndarray::Array2::from_shape_fn((3, 4), |(y, x)| (y * 4 + x) as f32);
        let t = Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), (1, 1, 3, 4), &dev).unwrap();
        let up = upsample_bilinear(&t, (7, 9)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let reference = crate::geometry::resize_bilinear(a.view(), (7, 9));
        for (p, q) in up.iter().zip(reference.iter()) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}
