//! Dense arrays and the reverse-mode differentiation tape.

mod dense;
mod params;
mod scalar;
mod tape;

pub use dense::Tensor;
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::{gemm, MatRef, Scalar};
pub use tape::{Backward, Tape, Var};
