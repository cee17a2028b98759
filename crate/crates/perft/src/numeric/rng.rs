//! Seeded, counter-based random number generation. Identical seeds give
//! identical draw sequences on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PerftError, Result};
use crate::numeric::Matrix;

pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    Zeros,
    /// Normal(0, std^2) draws.
    ScaledNormal(f64),
    /// Uniform on [-bound, bound].
    ScaledUniform(f64),
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        z * std
    }

    pub fn uniform(&mut self, bound: f64) -> f64 {
        self.inner.gen_range(-bound..bound)
    }

    pub fn gen_index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Child generator with an independent stream, seeded from this one.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.gen())
    }

    /// Standard-normal matrix scaled by `std`; shorthand used all over the tests.
    pub fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
        init_matrix(rows, cols, InitScheme::ScaledNormal(std), self)
    }
}

/// Deterministic matrix initialization under the given scheme.
pub fn init_matrix(rows: usize, cols: usize, scheme: InitScheme, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(PerftError::Argument(format!(
            "init_matrix requires positive dimensions, got {rows}x{cols}"
        )));
    }
    let data: Vec<f64> = match scheme {
        InitScheme::Zeros => vec![0.0; rows * cols],
        InitScheme::ScaledNormal(std) => (0..rows * cols).map(|_| rng.normal(std)).collect(),
        InitScheme::ScaledUniform(bound) => (0..rows * cols).map(|_| rng.uniform(bound)).collect(),
    };
    Matrix::from_vec(rows, cols, data)
}
