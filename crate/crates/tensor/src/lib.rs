//! Dense `f64` tensors with a small reverse-mode autodiff engine.
//!
//! The op set covers what a range-image forecasting network needs: 2D
//! convolutions with optional circular width padding and dilation,
//! transposed convolutions, batch normalization, gating nonlinearities,
//! broadcasting arithmetic and channel/batch reshuffles.

mod conv;
mod tensor;
mod var;

pub use conv::Conv2dSpec;
pub use tensor::Tensor;
pub use var::{sigmoid, Gradients, Var};
