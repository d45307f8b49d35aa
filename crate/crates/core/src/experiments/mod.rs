//! The S² autoencoder study and the toy diffusion studies.

pub mod s2;
pub mod sweep;
pub mod toy2d;

pub use s2::{gen_s2_dataset, train_toy_autoencoder, S2Mode, ToyS2Config, ToyS2Result};
pub use sweep::{run_sweep, SweepCell, SweepGrid, SweepRow};
pub use toy2d::{eval_dsm, gen_toy2d_dataset, train_toy_diffusion, Dataset, Toy2DConfig, Toy2DData, TrainOutcome};
