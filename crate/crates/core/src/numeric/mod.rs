//! Numeric substrate: matrices, MLPs with reverse mode, optimizers, RNG.

pub mod fd;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod rng;

pub use matrix::Matrix;
pub use mlp::{dot, per_sample_grads, sigmoid, Activation, ForwardCache, MlpGrad, MlpParams};
pub use optim::{adam_step, sgd_step, AdamState};
pub use rng::Rng;
