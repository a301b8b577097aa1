//! Fixtures shared by the kernel benchmarks.

use msmatch_core::corpus::{generate_synthetic, GeneratorConfig};
use msmatch_core::rng::Rng;
use msmatch_core::{Dataset, Matrix, Model, ModelConfig};
use rand::Rng as _;

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Default-sized model and the synthetic corpus it expects.
pub fn default_fixture(seed: u64) -> (Model, Dataset) {
    let data = generate_synthetic(&GeneratorConfig::default(), seed).expect("default generator is valid");
    let model = Model::new(ModelConfig::default(), seed).expect("default model is valid");
    (model, data)
}
