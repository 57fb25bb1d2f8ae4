//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use tape::{BatchStats, Gradients, NormMode, Tape, Var, BATCH_NORM_EPS};
pub use tensor::{numel, Tensor};
