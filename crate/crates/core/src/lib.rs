//! Spatiotemporal demand forecasting with permutation-invariant graph-network layers
//! conditioned on a learned temporal-context embedding.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! double-precision instantiation used by training, checkpoints and the CLI.

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod model;
pub mod synth;
pub mod training;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type TgNet64 = model::TgNet<f64>;
pub type TgNet32 = model::TgNet<f32>;
