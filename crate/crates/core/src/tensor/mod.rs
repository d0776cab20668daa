//! Minimal reverse-mode automatic differentiation over dense tensors.

mod adam;
pub mod gradcheck;
mod kernels;
mod real;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use adam::AdamState;
pub use kernels::Conv2dOptions;
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
