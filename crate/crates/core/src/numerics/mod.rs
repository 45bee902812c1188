//! Dense tensors, reverse-mode autodiff and finite-difference checking.

mod graph;
pub mod gradcheck;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{CustomBackward, Graph, RotaryTables, Var};
pub use tensor::{DType, Element, Tensor};

#[cfg(test)]
mod tests;
