//! Multi-scale glass-like object segmentation.
//!
//! The network resizes its input to three scales, encodes each with a shared
//! backbone, fuses the per-level features with per-pixel attention over
//! scales, decodes them top-down with hierarchical channel-down units and
//! finally refines the coarse logits by repeatedly re-reading the decoder
//! feature conditioned on the previous prediction.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod frm;
pub mod hcdd;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod error;
pub mod nn;
pub mod ops;
pub mod ppg;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{no_grad, Var};
pub use error::{Error, Result};
pub use model::MgNet;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
