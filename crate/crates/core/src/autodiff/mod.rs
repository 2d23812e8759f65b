//! Tensor arithmetic with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;

pub use gradcheck::{
    grad_check, relative_error, run_grad_check, GradCheckReport, GradCheckTarget, REL_ERR_FLOOR,
};
pub use graph::{sigmoid, Gradients, Graph, Var};
