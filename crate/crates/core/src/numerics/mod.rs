//! Dense rank-2 tensors, reverse-mode differentiation, gradient checking and
//! checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, ParamGradError};
pub use param::{ParamStore, Parameter};
pub use tape::{Gradients, Pick, Tape, Var};
pub use tensor::{DType, Element, Tensor};

/// Standard deviation of the seeded normal used for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[cfg(test)]
mod tests;
