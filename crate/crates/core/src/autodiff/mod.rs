//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;

