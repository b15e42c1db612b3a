//! Shared domain types: images, instance masks, clicks, interaction sets
//! and seen/unseen class splits.

mod rle;
mod split;

use std::sync::Arc;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rle::{decode_coco_string, encode_coco_string, Rle};
pub use split::{
    build_openimages_split, normalize_class_name, openimages_split_report, ClassSplit,
    DatasetName, Membership, OpenImagesSplitReport,
};

/// Instances below this many pixels are kept but reported as small.
pub const SMALL_INSTANCE_AREA: usize = 25;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("RLE counts sum to {actual}, expected {expected} pixels")]
    RleLength { expected: usize, actual: usize },
    #[error("malformed COCO RLE string: {0}")]
    RleString(String),
    #[error("interaction set for {0:?} has neither clicks nor text")]
    EmptyInteraction(String),
    #[error("click ({x}, {y}) lies outside a {width}x{height} image")]
    ClickOutOfBounds { x: u32, y: u32, width: usize, height: usize },
    #[error("decoded pixels are {actual:?} but the image record says {expected:?}")]
    ImageShape { expected: (usize, usize), actual: (usize, usize) },
    #[error("class split has no seen classes")]
    EmptySeenSet,
    #[error("{0} class list is empty")]
    EmptyClassList(&'static str),
    #[error("classes appear in both seen and unseen: {0:?}")]
    OverlappingSplit(Vec<String>),
    #[error("classes missing from the split: {0:?}")]
    UncoveredClasses(Vec<String>),
    #[error("unknown class {name:?}; nearest known: {nearest:?}")]
    UnknownClass { name: String, nearest: Vec<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub uri_or_path: String,
}

/// An image record together with its decoded pixels.
#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub sample: ImageSample,
    pub pixels: Arc<RgbImage>,
}

impl LoadedImage {
    pub fn new(sample: ImageSample, pixels: Arc<RgbImage>) -> Result<Self, DataError> {
        let actual = (pixels.height() as usize, pixels.width() as usize);
        let expected = (sample.height, sample.width);
        if actual != expected {
            return Err(DataError::ImageShape { expected, actual });
        }
        Ok(LoadedImage { sample, pixels })
    }

    /// `(height, width)`
    pub fn shape(&self) -> (usize, usize) {
        (self.sample.height, self.sample.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub image_id: String,
    pub instance_id: String,
    pub class_name: String,
    pub rle: Rle,
    pub area: usize,
}

impl InstanceMask {
    pub fn new(
        image_id: impl Into<String>,
        instance_id: impl Into<String>,
        class_name: impl Into<String>,
        rle: Rle,
    ) -> Self {
        let area = rle.area();
        InstanceMask {
            image_id: image_id.into(),
            instance_id: instance_id.into(),
            class_name: class_name.into(),
            rle,
            area,
        }
    }

    pub fn from_mask(
        image_id: impl Into<String>,
        instance_id: impl Into<String>,
        class_name: impl Into<String>,
        mask: &Array2<bool>,
    ) -> Self {
        Self::new(image_id, instance_id, class_name, Rle::encode(mask.view()))
    }

    pub fn decode(&self) -> Result<Array2<bool>, DataError> {
        self.rle.decode()
    }

    /// `(height, width)`
    pub fn shape(&self) -> (usize, usize) {
        (self.rle.height(), self.rle.width())
    }

    pub fn is_small(&self) -> bool {
        self.area < SMALL_INSTANCE_AREA
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    #[serde(alias = "+", alias = "pos")]
    Positive,
    #[serde(alias = "-", alias = "neg")]
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub x: u32,
    pub y: u32,
    pub polarity: Polarity,
}

impl Click {
    pub fn positive(x: u32, y: u32) -> Self {
        Click { x, y, polarity: Polarity::Positive }
    }

    pub fn negative(x: u32, y: u32) -> Self {
        Click { x, y, polarity: Polarity::Negative }
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<(), DataError> {
        if (self.x as usize) < width && (self.y as usize) < height {
            Ok(())
        } else {
            Err(DataError::ClickOutOfBounds { x: self.x, y: self.y, width, height })
        }
    }
}

/// Clicks and/or a text phrase for one instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawInteractionSet")]
pub struct InteractionSet {
    pub instance_id: String,
    pub clicks: Vec<Click>,
    pub text: Option<String>,
}

#[derive(Deserialize)]
struct RawInteractionSet {
    instance_id: String,
    #[serde(default)]
    clicks: Vec<Click>,
    #[serde(default)]
    text: Option<String>,
}

impl TryFrom<RawInteractionSet> for InteractionSet {
    type Error = DataError;

    fn try_from(raw: RawInteractionSet) -> Result<Self, Self::Error> {
        InteractionSet::new(raw.instance_id, raw.clicks, raw.text)
    }
}

impl InteractionSet {
    /// Blank text counts as absent.
    pub fn new(
        instance_id: impl Into<String>,
        clicks: Vec<Click>,
        text: Option<String>,
    ) -> Result<Self, DataError> {
        let instance_id = instance_id.into();
        let text = text.filter(|t| !t.trim().is_empty());
        if clicks.is_empty() && text.is_none() {
            return Err(DataError::EmptyInteraction(instance_id));
        }
        Ok(InteractionSet { instance_id, clicks, text })
    }

    pub fn positives(&self) -> impl Iterator<Item = &Click> {
        self.clicks.iter().filter(|c| c.polarity == Polarity::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &Click> {
        self.clicks.iter().filter(|c| c.polarity == Polarity::Negative)
    }

    /// `(positive, negative)` click counts.
    pub fn counts(&self) -> (usize, usize) {
        (self.positives().count(), self.negatives().count())
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<(), DataError> {
        self.clicks.iter().try_for_each(|c| c.check_bounds(width, height))
    }

    /// The same interaction without its text phrase.
    pub fn without_text(&self) -> Result<Self, DataError> {
        InteractionSet::new(self.instance_id.clone(), self.clicks.clone(), None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interaction_needs_clicks_or_text() {
        assert!(InteractionSet::new("a", vec![], None).is_err());
        assert!(InteractionSet::new("a", vec![], Some("  ".into())).is_err());
        assert!(InteractionSet::new("a", vec![], Some("tie".into())).is_ok());
        let set = InteractionSet::new(
            "a",
            vec![Click::positive(1, 2), Click::negative(3, 4), Click::positive(0, 0)],
            None,
        )
        .unwrap();
        assert_eq!(set.counts(), (2, 1));
    }

    #[test]
    fn interaction_json_is_validated() {
        let ok: InteractionSet = serde_json::from_str(
            r#"{"instance_id":"7","clicks":[{"x":1,"y":2,"polarity":"+"}],"text":"dog"}"#,
        )
        .unwrap();
        assert_eq!(ok.clicks[0].polarity, Polarity::Positive);
        let bad = serde_json::from_str::<InteractionSet>(r#"{"instance_id":"7","clicks":[]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn click_bounds() {
        assert!(Click::positive(3, 1).check_bounds(4, 2).is_ok());
        assert!(Click::positive(4, 1).check_bounds(4, 2).is_err());
        assert!(Click::negative(0, 2).check_bounds(4, 2).is_err());
    }

    #[test]
    fn instance_area_follows_rle() {
        let mut m = Array2::from_elem((6, 6), false);
        m[[2, 3]] = true;
        m[[4, 1]] = true;
        let inst = InstanceMask::from_mask("img", "1", "cat", &m);
        assert_eq!(inst.area, 2);
        assert!(inst.is_small());
        assert_eq!(inst.decode().unwrap(), m);
    }
}
