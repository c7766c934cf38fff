//! Differentiable tensor operations, implemented as methods on [`Var`](crate::tape::Var).

mod elementwise;
pub(crate) mod gemm;
mod linalg;
pub(crate) mod reduce;
mod shape;

pub use elementwise::sigmoid;
pub use reduce::softmax;
