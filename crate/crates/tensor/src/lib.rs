//! Dense tensors, compute kernels and reverse-mode autodiff sized for
//! desk-scale training and exact gradient checks of the DRRNet model.
//!
//! Everything is generic over [`Scalar`] (`f32` / `f64`). Kernels reduce in a
//! fixed order, so results do not depend on thread count or on whether the
//! `parallel` feature is enabled.

pub mod autograd;
pub mod counter;
pub mod kernels;
pub mod nn;
mod ops;
pub mod parallel;
mod scalar;
mod tensor;

pub use autograd::{grad_enabled, no_grad, Gradients, Var};
pub use counter::count_macs;
pub use kernels::Conv2dOpts;
pub use ops::{channel_stats, sigmoid, softplus};
pub use scalar::{gemm, lit, Layout, Scalar};
pub use tensor::{strides_of, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
}
