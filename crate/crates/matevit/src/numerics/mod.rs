//! Minimal dense tensor arithmetic with reverse-mode automatic
//! differentiation.
//!
//! Everything runs on the CPU over flat row-major buffers. Training and
//! inference use `f32`; gradient checking instantiates the same code at `f64`
//! through the [`Scalar`] trait, where the finite-difference oracle has
//! enough headroom to resolve errors below 1e-6.

mod gradcheck;
mod ops;
mod optim;
mod rng;
mod scalar;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use optim::{cosine_lr, sgd_momentum_step};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{no_grad, NoGradGuard, Tensor, TensorError};
