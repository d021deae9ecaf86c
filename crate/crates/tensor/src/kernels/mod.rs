//! Plain (non-differentiable) compute kernels on [`Tensor`](crate::Tensor).

pub mod broadcast;
pub mod conv;
pub mod fft;
pub mod resize;

pub use broadcast::{broadcast_binary, broadcast_shape, reduce_to_shape};
pub use conv::{conv2d_macs, conv2d_out_shape, Conv2dOpts};
pub use fft::fft2;
pub use resize::{avg_pool2d, resize_bilinear_forward};
