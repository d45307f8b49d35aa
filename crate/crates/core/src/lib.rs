//! Isometric regularization for diffusion models on a sphere-shaped latent space.

pub mod diffcore;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod regularizers;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub use diffcore::{Activation, Mlp};
pub use diffusion::{NoiseSchedule, ScoreNet, ScoreNetSpec};
pub use io::{Checkpoint, RunConfig};
pub use regularizers::{IsoConfig, MetricKind, RegularizerKind, TraceMode};
