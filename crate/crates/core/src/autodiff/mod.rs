//! Reverse-mode automatic differentiation for the handful of dense ops the
//! encoders and objectives use, plus a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
