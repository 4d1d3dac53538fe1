//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
pub mod snapshot;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, relative_error, GradCheckReport, FD_STEP};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
