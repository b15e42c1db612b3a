//! The 5-channel segmentation network, its training loop, checkpoints and
//! single-instance prediction.

mod checkpoint;
mod conv;
mod gradcheck;
mod net;
mod params;
mod predict;
mod train;

pub use checkpoint::{git_revision, split_hash, Checkpoint, CheckpointError, TrainingManifest};
pub use conv::{conv2d, ConvGeom};
pub use gradcheck::{stand_in_gradient_check, GradCheckReport};
pub use net::{masked_cross_entropy, upsample_bilinear, NetConfig, NetError, SegNet, StageConfig, IN_CHANNELS, OUT_CLASSES};
pub use params::{Init, ParamStore};
pub use predict::{finish, PredictError, Prediction, THRESHOLD};
pub use train::{
    train, Batch, ChannelStats, Diagnostics, LrSchedule, ModelConfig, OptimizerConfig, TrainError, TrainOutcome, Trainer,
};
