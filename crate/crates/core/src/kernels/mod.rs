//! Numeric kernels behind the differentiable operations.

pub mod conv;
pub mod interp;
pub mod matmul;

pub use conv::ConvGeometry;
