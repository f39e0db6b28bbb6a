//! Dense tensors, reverse-mode differentiation and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradient, GradCheckError, GradCheckReport, DEFAULT_STEP};
pub use graph::{Gradients, Graph, GraphError, Var};
pub use tensor::Tensor;
