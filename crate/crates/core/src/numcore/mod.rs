//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport, GradCheckTolerance, GradMismatch};
pub use tape::{NeighborLists, ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::Tensor;
