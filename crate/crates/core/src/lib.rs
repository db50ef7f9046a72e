//! Spatiotemporal masked image modelling for multi-band, multi-timestamp
//! imagery: data pipeline, window masking, frequency-domain augmentation, a
//! hybrid convolution/window-attention encoder, the reconstruction loss,
//! pretraining, and downstream heads with metrics.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete types used for training and for `f64` checks.

pub mod autodiff;
pub mod data;
pub mod downstream;
pub mod error;
pub mod frequency;
pub mod loss;
pub mod masking;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model = model::HybridModel<f32>;
pub type Model64 = model::HybridModel<f64>;
pub type Sample = data::SceneSample<f32>;
pub type Sample64 = data::SceneSample<f64>;
pub type TaskHead = downstream::Head<f32>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
