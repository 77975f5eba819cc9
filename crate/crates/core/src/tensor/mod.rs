//! Dense tensors with reverse-mode automatic differentiation.

mod array;
mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use array::Tensor;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{BatchStats, CustomOp, Graph, Primitive, Var};
