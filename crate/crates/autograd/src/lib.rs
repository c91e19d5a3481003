//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! Everything is generic over [`Scalar`] so the same network code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.
//! The op set is the one convolutional image networks need: dense and
//! depthwise convolution, group/layer/response normalization, pooling,
//! pixel gathers and the usual pointwise nonlinearities.

mod graph;
mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use ops::PixelMask;
pub use optim::AdamW;
pub use params::{clip_global_norm, global_norm, Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
