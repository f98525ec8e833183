//! Differentiable tensor operations and finite-difference verification.

mod graph;
pub mod gradcheck;

pub use graph::{Ctx, Graph, Var};
pub use gradcheck::{gradient_check, GradCheckReport};
