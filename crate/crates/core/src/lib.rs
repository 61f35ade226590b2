//! Predictive pruning: importance-guided layerwise ratio allocation for a toy
//! transformer, a CNN that predicts output divergence from compressed masks,
//! and a DDPG agent that searches pruning policies against that predictor.

pub mod agent;
pub mod allocation;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod importance;
pub mod io;
pub mod model;
pub mod predictor;
pub mod pruning;
pub mod stats;

pub use error::{PpfError, Result};
