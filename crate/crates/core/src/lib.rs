//! Multimodal recommendation with entropy-triggered routing over a pool of
//! triplet-weighted experts.
//!
//! Numeric code is generic over [`Scalar`]; `f32` is the training default and
//! `f64` is used for gradient checks.

pub mod autograd;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod format;
pub mod graph;
pub mod losses;
pub mod model;
pub mod moe;
pub mod optim;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{MagnetError, Result};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
