//! Dense tensors, the differentiable ops the pipeline needs, and a
//! define-by-run reverse-mode tape. CPU only, no fusion, no views; the
//! tape is rebuilt on every forward pass.

mod fft;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use fft::{irfft2, rfft2, Spectrum};
pub use ops::{add_channel_bias, bilinear_resize, concat_channels, conv2d};
pub use scalar::Scalar;
pub use tape::{backward, sigmoid, softplus_value, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: produced a non-finite value")]
    NotFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
}

pub(crate) fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}
