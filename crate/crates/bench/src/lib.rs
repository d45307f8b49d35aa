//! Benchmark fixtures shared by the criterion targets.

use isodiff_core::rng::{normal_vec, stream};
use isodiff_core::{Activation, Mlp, NoiseSchedule, ScoreNet, ScoreNetSpec, Tensor};

pub const DATA_DIM: usize = 64;

pub fn encoder() -> Mlp {
    Mlp::init(7, &[DATA_DIM + 8, 128, 128, 16], Activation::Tanh).expect("valid dims")
}

pub fn scorenet() -> ScoreNet {
    let spec = ScoreNetSpec { data_dim: DATA_DIM, feature_dim: 16, hidden: vec![128, 128], time_dim: 8, horizon: 1000, activation: Activation::Tanh };
    ScoreNet::init(7, &spec).expect("valid spec")
}

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).expect("valid schedule")
}

pub fn gaussian(rows: usize, cols: usize, label: &str) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(&mut stream(0, label), rows * cols)).expect("shape")
}
