//! Minimal neural-network engine: tensors, sequential conv/dense stacks with
//! prefix and suffix passes, losses, backpropagation and Adam.

mod adam;
pub mod loss;
mod model;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{
    cross_entropy, cross_entropy_grad, distill_kl_grad, kl_divergence, mse, mse_grad, tempered_softmax, KlOrder,
};
pub use model::{
    forward, forward_prefix, forward_range, forward_suffix, Activation, Backward, Gradients, LayerSpec, ModelParams,
    ModelSpec, ParamBlock, ParamRange, Tape,
};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("usage error: {0}")]
    Usage(String),
}
