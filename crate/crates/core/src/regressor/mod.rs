//! Convolutional regressor mapping raw enhancement curves to CBV, CBF and
//! TTP without an arterial input function.

pub mod layers;
mod model;
mod real;
mod train;
pub mod unet;

pub use model::{infer, slice_samples, InputNormalization, Regressor, Sample, OUTPUT_KINDS};
pub use real::Real;
pub use train::{
    evaluate, grad_check, sample_gradient, train, EpochRecord, GradCheck, History, StopReason,
    TrainConfig,
};
pub use unet::{Grads, UNet, UNetConfig};
