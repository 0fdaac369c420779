//! Seeded RNG construction so every run is reproducible from a 64-bit seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::{Matrix, Scalar};

/// ChaCha stream keyed by `(seed, stream)`; distinct streams are independent.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform matrix in `[-scale, scale)`.
pub fn random_matrix<F: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Matrix<F> {
    let data = (0..rows * cols)
        .map(|_| F::from_f64(rng.random_range(-scale..scale)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// Gaussian matrix with the given standard deviation.
pub fn normal_matrix<F: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Matrix<F> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols)
        .map(|_| F::from_f64(normal.sample(rng)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// Xavier-uniform matrix for a `rows x cols` weight (fan_out x fan_in).
pub fn xavier_matrix<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    random_matrix(rng, rows, cols, bound)
}

/// Fisher-Yates shuffle driven by the given rng.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
