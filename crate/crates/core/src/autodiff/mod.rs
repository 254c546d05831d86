//! Reverse-mode automatic differentiation over dense tensors, finite-difference gradient
//! checking and integrated-gradients path attribution.

mod gradcheck;
mod graph;
mod ig;
mod tensor;

pub use gradcheck::{grad_check, max_relative_error, numeric_gradient, relative_error, GradCheckReport, ParamMap};
pub use graph::{Gradients, Graph, NodeId};
pub use ig::{integrated_gradients, Attribution};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
