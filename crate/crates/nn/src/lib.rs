//! Reverse-mode autograd over dense `f64` tensors.
//!
//! Provides the layers needed by a small decoder-only transformer, a dilated
//! CNN regressor and actor/critic MLPs: dense, convolution, adaptive pooling,
//! attention, normalisation, activations, losses, optimisers and a binary
//! weight format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod optim;
pub mod param;
pub mod tensor;

pub use checkpoint::{decode_weights, encode_weights, read_weights, write_weights};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_report, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, PoolMode, Var};
pub use optim::{sgd_step, Adam, Optimizer, Sgd};
pub use param::{xavier_uniform, ParamSet, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
