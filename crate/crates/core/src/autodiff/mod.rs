//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod conv;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::softmax_row;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
