//! Dense-tensor engine: reverse-mode autodiff, primitives, Adam, the warmup
//! learning-rate schedule, deterministic PRNG streams, and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use ops::{apply_primitive, Primitive};
pub use optim::{
    adam_step, clip_gradients, noam_lr, OptimizerState, ParamBuilder, ParamInit,
    ParamSnapshot, ParameterRegistry,
};
pub use rng::Rng;
pub use tensor::{no_grad, Tensor};
