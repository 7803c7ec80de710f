//! Dense arrays, reverse-mode differentiation, perceptrons and Adam.

mod adam;
pub mod checkpoint;
mod graph;
mod mlp;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamState, TrainConfig, BETA1, BETA2, EPSILON};
pub use graph::{GatherStencil, Gradients, Graph, Var};
pub use mlp::{Mlp, LEAKY_SLOPE};
pub use tensor::Tensor;
#[allow(unused_imports)]
pub(crate) use tensor::gemm;

use crate::binio::DecodeError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Models exposing an ordered list of trainable tensors.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}
