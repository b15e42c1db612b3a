use std::sync::Arc;

use candle_core::Tensor;
use ndarray::{Array2, Array3};

use super::checkpoint::Checkpoint;
use super::net::NetError;
use crate::data::{InstanceMask, InteractionSet, LoadedImage, Rle};
use crate::dataset::{assemble_channels, DatasetError, SaliencySource};
use crate::geometry::Letterbox;
use crate::saliency::SaliencyMap;

pub const THRESHOLD: f32 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum PredictError {
    #[error("interaction has text {0:?} but no saliency backend is configured")]
    NoBackend(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Native-resolution mask of the predicted instance.
    pub mask: InstanceMask,
    /// Mean foreground probability over predicted foreground; 0 when empty.
    pub confidence: f64,
    /// Saliency used for the saliency channel, if any.
    pub saliency: Option<Arc<SaliencyMap>>,
}

impl Checkpoint {
    /// Network input for one interaction, plus the saliency map it used.
    pub fn prepare(
        &self,
        image: &LoadedImage,
        interactions: &InteractionSet,
        saliency: Option<&SaliencySource>,
    ) -> Result<(Array3<f32>, Letterbox, Option<Arc<SaliencyMap>>), PredictError> {
        let assembly = &self.manifest.assembly;
        let sal = match (&interactions.text, assembly.use_text) {
            (Some(text), true) => {
                let src = saliency.ok_or_else(|| PredictError::NoBackend(text.clone()))?;
                Some(src.fetch(image, text)?)
            }
            _ => None,
        };
        let (channels, lb) = assemble_channels(image, interactions, sal.as_deref(), assembly)?;
        Ok((channels, lb, sal))
    }

    /// Foreground probabilities `(B, S, S)` for a stack of prepared inputs.
    pub fn probabilities(&self, inputs: &[Array3<f32>]) -> Result<Vec<Array2<f32>>, PredictError> {
        let Some(first) = inputs.first() else { return Ok(Vec::new()) };
        let (c, h, w) = first.dim();
        let flat: Vec<f32> = inputs.iter().flat_map(|a| a.iter().copied()).collect();
        let x = Tensor::from_vec(flat, (inputs.len(), c, h, w), self.net.params().device())?;
        let p = self.net.foreground_probability(&x)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(p.chunks_exact(h * w).map(|chunk| Array2::from_shape_vec((h, w), chunk.to_vec()).expect("chunk size")).collect())
    }

    /// Segment one instance: assemble channels, run the network, undo the
    /// letterbox and threshold at 0.5.
    pub fn predict_instance(
        &self,
        image: &LoadedImage,
        interactions: &InteractionSet,
        saliency: Option<&SaliencySource>,
    ) -> Result<Prediction, PredictError> {
        let (channels, lb, sal) = self.prepare(image, interactions, saliency)?;
        let prob = self.probabilities(&[channels])?.pop().expect("one input");
        Ok(finish(&prob, &lb, image, interactions, sal))
    }
}

/// Threshold a network-resolution probability map back at image resolution.
pub fn finish(
    prob: &Array2<f32>,
    lb: &Letterbox,
    image: &LoadedImage,
    interactions: &InteractionSet,
    saliency: Option<Arc<SaliencyMap>>,
) -> Prediction {
    let native = lb.invert_f32(prob.view());
    let mask = native.mapv(|p| p > THRESHOLD);
    let fg: Vec<f32> = native.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(&p, _)| p).collect();
    let confidence = if fg.is_empty() { 0.0 } else { fg.iter().map(|&p| p as f64).sum::<f64>() / fg.len() as f64 };
    let inst = InstanceMask::new(
        image.sample.image_id.clone(),
        interactions.instance_id.clone(),
        interactions.text.clone().unwrap_or_default(),
        Rle::encode(mask.view()),
    );
    Prediction { mask: inst, confidence, saliency }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicks::ClickConfig;
    use crate::data::{Click, ImageSample};
    use crate::dataset::AssemblyConfig;
    use crate::model::{ModelConfig, TrainingManifest};
    use crate::saliency::StubBackend;
    use candle_core::Device;

    fn setup(use_text: bool) -> (Checkpoint, LoadedImage) {
        let asm = AssemblyConfig { resolution: 32, use_text, ..Default::default() };
        let m = TrainingManifest::new("t", "stub", ClickConfig::default(), asm, ModelConfig::toy());
        let ck = Checkpoint::untrained(m, &Device::Cpu).unwrap();
        let px = image::RgbImage::from_fn(30, 20, |x, y| image::Rgb([(x * 8) as u8, (y * 12) as u8, 7]));
        let s = ImageSample { image_id: "a".into(), width: 30, height: 20, uri_or_path: String::new() };
        (ck, LoadedImage::new(s, Arc::new(px)).unwrap())
    }

    #[test]
    fn prediction_is_native_size_and_deterministic() {
        let (ck, img) = setup(true);
        let src = SaliencySource::new(Arc::new(StubBackend::new()));
        let set = InteractionSet::new("i", vec![Click::positive(3, 4)], Some("blob:cx=3,cy=4,s=2".into())).unwrap();
        let a = ck.predict_instance(&img, &set, Some(&src)).unwrap();
        let b = ck.predict_instance(&img, &set, Some(&src)).unwrap();
        assert_eq!(a.mask.rle, b.mask.rle);
        assert_eq!(a.mask.shape(), (20, 30));
        assert!((0.0..=1.0).contains(&a.confidence));
        assert!(a.saliency.is_some());
    }

    #[test]
    fn text_without_backend_is_an_error() {
        let (ck, img) = setup(true);
        let set = InteractionSet::new("i", vec![Click::positive(3, 4)], Some("dog".into())).unwrap();
        assert!(matches!(ck.predict_instance(&img, &set, None), Err(PredictError::NoBackend(_))));
        // Click-only models ignore text.
        let (ck, img) = setup(false);
        assert!(ck.predict_instance(&img, &set, None).is_ok());
    }

    #[test]
    fn out_of_bounds_clicks_rejected() {
        let (ck, img) = setup(false);
        let set = InteractionSet::new("i", vec![Click::positive(30, 4)], None).unwrap();
        assert!(ck.predict_instance(&img, &set, None).is_err());
    }
}
