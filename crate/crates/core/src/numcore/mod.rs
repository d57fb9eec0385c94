//! Dense `f64` tensors, a define-by-run autodiff graph, and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{bce_term, param_grads, Gradients, Graph, NodeId, PROB_CLAMP};
pub use tensor::{sigmoid, Tensor};
