//! Minimal `f64` tensor library with reverse-mode autodiff, convolution
//! kernels, parameter binding and the Adam optimizer.

pub mod autograd;
pub mod conv;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use autograd::{Grads, Var};
pub use conv::ConvGeom;
pub use nn::{BatchNorm2d, Binder, Conv2d, Linear, Module, NormMode, NormUpdate, Param};
pub use optim::Adam;
pub use tensor::{matmul, transpose2, Tensor};
