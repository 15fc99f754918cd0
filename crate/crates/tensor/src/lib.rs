//! Dense channels-last tensors, deterministic kernels and a reverse-mode
//! gradient tape, sized for small convolutional meta-learners on one core.

mod error;
pub mod kernels;
#[cfg(feature = "oracle")]
pub mod oracle;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use real::{DType, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
