//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
