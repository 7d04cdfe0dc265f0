//! Numeric substrate: dense tensors, tape-based reverse-mode autodiff,
//! AdamW and a warmup + cosine learning-rate schedule.

pub mod attention;
mod error;
pub mod functional;
pub mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{KernelError, Result};
pub use optim::{cosine_warmup_lr, AdamW, AdamWConfig};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
