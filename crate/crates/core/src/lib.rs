//! Text + click interactive segmentation.
//!
//! The crate covers the whole loop: synthesizing click supervision from
//! instance masks, turning a text phrase into a per-pixel saliency map,
//! assembling 5-channel inputs (RGB + click map + saliency), training a
//! class-agnostic two-class segmentation network, evaluating it under
//! seen/unseen class splits, and serving it over HTTP for interactive
//! annotation.
//!
//! All H×W grids are row-major and indexed `(y, x)`.
//!
//! | module | contents |
//! |---|---|
//! | [`data`] | masks, RLE codec, clicks, interaction sets, class splits |
//! | [`geometry`] | distance transforms, channel normalization, IoU and boundary IoU |
//! | [`clicks`] | positive/negative click synthesis with a relaxation ladder |
//! | [`saliency`] | saliency backends (MaskCLIP-style readout, analytic stub) and cache |
//! | [`dataset`] | COCO ingest, example assembly, batched loaders, experiment config |
//! | [`model`] | the 5-channel segmentation network, training, checkpoints, prediction |
//! | [`eval`] | seen/unseen reports, boundary IoU, distractor buckets, interaction sweeps |
//! | [`experiment`] | config-driven runs: data, clicks, training, evaluation |
//! | [`service`] | the HTTP inference service |
//! | [`synthetic`] | procedurally generated shape scenes for tests and demos |

pub mod clicks;
pub mod data;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod saliency;
pub mod service;
pub mod synthetic;

pub use data::{
    ClassSplit, Click, DataError, ImageSample, InstanceMask, InteractionSet, LoadedImage,
    Polarity, Rle,
};
