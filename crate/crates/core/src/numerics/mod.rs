//! Dense 64-bit tensors, a reverse-mode tape, and a finite-difference
//! gradient checker.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use ops::{gelu_scalar, layer_norm_rows, log_softmax_rows, softmax_rows, GeluKind};
pub use tape::{AttentionLayout, Gradients, Tape, Var};
pub use tensor::Tensor;
