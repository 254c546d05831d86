//! Dual-view FiLM mixture-of-experts classifier for fixed-length DNA methylation windows,
//! with the training objective, evaluation metrics, contrastive attention and gradient
//! attribution analyses, and in-silico mutagenesis built on top of a small reverse-mode
//! autodiff engine.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the `*64` aliases below
//! are the double-precision instantiations the command-line tool uses.

pub mod autodiff;
pub mod error;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod seqdata;
pub mod stats;
pub mod trainer;

mod scalar;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type ParamMap64 = autodiff::ParamMap<f64>;
