//! Reverse-mode automatic differentiation over a fixed set of primitives.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, grad_check_in, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
