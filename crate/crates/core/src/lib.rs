//! Structure-preserving super resolution.
//!
//! A two-branch ×4 super-resolution generator guided by image gradient
//! maps, image-space and gradient-space discriminators, and the combined
//! pixel / perceptual / adversarial / gradient objective used to train them.
//!
//! The crate carries its own small reverse-mode autodiff engine ([`nn`]) so
//! that every piece of the pipeline, including the gradient-map operator, is
//! differentiable end to end on the CPU in 64-bit floating point.

pub mod arch;
pub mod data;
pub mod disc;
mod error;
pub mod gradops;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod train;

pub use arch::{build_generator, Generator, GeneratorConfig, GeneratorOutput};
pub use disc::{DiscConfig, Discriminator};
pub use error::{Error, Result};
pub use gradops::{extract_gradient, GradientMap, Image, DEFAULT_EPSILON};
pub use losses::{GanMode, LossReport, LossWeights};
pub use nn::{Checkpoint, Graph, ParamTree, Tensor, Var};
