//! The fusion architecture: review components, multi-attention
//! compression, the attentive decoder and the training objective.

mod checkpoint;
mod config;
mod gradcheck;
mod model;

pub use checkpoint::Checkpoint;
pub use config::{Ablation, FusionConfig, ModelConfig};
pub use gradcheck::GradCheckSetup;
pub use model::{
    combine_losses, init_stage2, Census, DecoderContext, EncoderOutput, Fusion, LossOptions, LossParts, Mode, RfNet,
    SampledCaptions, ThoughtVectors, TrainBatch, ViewFeatures, ViewInputs,
};
