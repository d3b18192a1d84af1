//! A small masked-autoencoder vision transformer in `f64`.

mod checkpoint;
mod config;
mod model;
mod params;
mod patch;
pub(crate) mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{
    parameter_count, size_ladder, MaeModelConfig, NamedConfig, SizeLadder, LADDER_NAMES,
    LADDER_PATCH, LADDER_RATIO_RANGE, MLP_RATIO,
};
pub use model::{forward, gradient, mae_loss, LossGradient, MaeModel, MaeOutput};
pub use params::{LayoutEntry, ParamKind, ParameterStore};
pub use patch::{
    masked_count, patchify, patchify_record, sample_mask, unpatchify, MaskSet, MASK_RATIO,
};
pub use tensor::Matrix;
pub use train::{record_mask, train, LossTrace, TrainSchedule};

pub(crate) use train::manifest_patches;
