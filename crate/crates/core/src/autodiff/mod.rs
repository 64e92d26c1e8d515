//! Reverse-mode differentiation over dense 2D `f64` arrays.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport, GradCheckStatus};
pub use tape::{Tape, Var};
pub use tensor::{argmax, Tensor};

