//! Minimal differentiable engine: tensors, a fixed layer vocabulary with
//! hand-written backward passes, softmax cross-entropy, SGD with momentum
//! and the poly learning-rate schedule, and finite-difference checks.
//!
//! Everything is generic over [`Scalar`] so the same code runs in single
//! precision for training and double precision for gradient checks.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use layers::{Layer, LayerSpec, Mode, Node};
pub use loss::{softmax, softmax_cross_entropy};
pub use optim::{poly_lr, sgd_step, OptimConfig, OptimState};
pub use tensor::{Scalar, Tensor};
