//! Dense f64 tensors with a recorded-operation tape for reverse-mode gradients.
//!
//! The op set is the minimum needed by a small convolutional segmenter and
//! the auxiliary networks that steer its updates. Every op validates shapes
//! up front and rejects non-finite results.

mod error;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;
