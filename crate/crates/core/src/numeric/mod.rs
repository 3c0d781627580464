//! Minimal dense-tensor engine: row-major `f64` storage, image operations and
//! tape-based reverse-mode differentiation.

mod gradcheck;
mod nn;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use nn::{bilinear_sample, conv2d, conv_out_extent, resize_bilinear, resize_source_coord};
pub(crate) use ops::matmul_raw;
pub use ops::softmax;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
