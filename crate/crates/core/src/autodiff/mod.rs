//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod adam;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use tape::{softplus_value, Gradients, Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;
