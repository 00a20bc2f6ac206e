//! Minimal reverse-mode differentiation over real and complex arrays.

mod array;
pub mod gradcheck;
mod param;
mod tape;

pub use array::{ComplexArray, RealArray, Value};
pub use gradcheck::{finite_difference_grad, max_relative_error};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
