//! Minimal reverse-mode differentiation: dense tensors, a recording tape,
//! a finite-difference checker and the Adam optimizer.

mod adam;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_difference_check, GradCheckReport, DEFAULT_FD_STEP};
pub(crate) use param::uniform;
pub use param::{Linear, Module, Param, ParamList};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
