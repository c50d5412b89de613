//! Dense tensors and a reverse-mode tape.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference, max_relative_error, relative_error};
pub use real::Real;
pub use tape::{window_output_extent, ConvGeometry, ElementwiseOp, Tape, Var};
pub use tensor::Tensor;
