//! Learned image compression with a Swin-based transform, channel-wise
//! autoregressive entropy model and feature/entropy-based distillation.

pub mod autograd;
pub mod bitstream_codec;
pub mod codec_networks;
pub mod entropy_engine;
pub mod error;
pub mod eval_metrics;
pub mod feds_distillation;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod training_pipeline;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type CodecModel32 = model::CodecModel<f32>;
pub type CodecModel64 = model::CodecModel<f64>;
