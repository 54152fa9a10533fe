//! Minimal differentiable tensor substrate: a tape-based autodiff graph,
//! the handful of layers the networks need, named parameter trees and the
//! on-disk checkpoint container.

mod checkpoint;
mod direct;
pub mod gradcheck;
mod graph;
#[cfg(test)]
mod graph_tests;
pub(crate) mod kernels;
mod layers;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Graph, Var};
pub use kernels::PadMode;
pub use layers::{Conv2d, Dense, Params, LEAKY_SLOPE};
pub use params::ParamTree;
pub use tensor::Tensor;
