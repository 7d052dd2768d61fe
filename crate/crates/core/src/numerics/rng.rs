use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DenseMatrix;

/// Seeded scalar stream. ChaCha is counter based and its output does not
/// depend on platform word size, so a seed pins the stream everywhere.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream keyed by `(seed, stream)`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// Matrix of i.i.d. normal entries. A zero `std` yields a constant matrix
/// without touching the stream.
pub fn gaussian_matrix(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut Rng) -> DenseMatrix {
    assert!(std >= 0.0 && std.is_finite(), "std must be finite and >= 0");
    if std == 0.0 {
        return DenseMatrix::filled(rows, cols, mean);
    }
    DenseMatrix::from_fn(rows, cols, |_, _| mean + std * rng.normal())
}
