//! Scaled-down U-Net segmentation network and its M-step trainer.
//!
//! The trainer minimizes the pixel-wise cross-entropy against a target label map in which
//! `UNKNOWN` pixels contribute nothing, using ADAM with a step-decayed learning rate.

mod net;
mod train;

pub use net::{
    forward, masked_cross_entropy, predict, unet_logits, NetConfig, NetOutput, NetParams,
};
pub(crate) use net::make_batch;
pub use train::{
    adam_step, learning_rate, train_iteration, train_m_step, BatchSampler, TrainConfig,
    TrainReport, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub(crate) use train::collect_grads;
