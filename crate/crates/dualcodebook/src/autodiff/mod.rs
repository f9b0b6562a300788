//! 64-bit tensors, a reverse-mode gradient tape, and finite-difference
//! gradient checking.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, relative_error, FdPlan, FdReport, REL_ERR_FLOOR};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
