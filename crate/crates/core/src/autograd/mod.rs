//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, GroupReport};
pub use tape::{Reduction, Tape, Var};
pub use tensor::{log_softmax_rows, sinusoidal_positions, Tensor};
