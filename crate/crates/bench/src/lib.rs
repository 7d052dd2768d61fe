//! Benchmark fixtures shared by the criterion targets.

use deal_core::lora::{FrozenBackbone, LoraAdapter};
use deal_core::numerics::{gaussian_matrix, DenseMatrix, Rng};
use deal_core::training::{Architecture, DealModel, UpdateStrategy};

/// A both-sides DEAL model over an `n x n` backbone with rank `r`, plus a
/// batch of inputs and targets.
pub fn fixture(n: usize, r: usize, batch: usize, seed: u64) -> (DealModel, DenseMatrix, DenseMatrix) {
    let mut rng = Rng::new(seed);
    let backbone = FrozenBackbone::new(gaussian_matrix(n, n, 0.0, 0.1, &mut rng));
    let base = LoraAdapter::new(gaussian_matrix(n, r, 0.0, 0.1, &mut rng), gaussian_matrix(n, r, 0.0, 0.1, &mut rng))
        .expect("rank within bounds");
    let model = DealModel::new(backbone, base, UpdateStrategy::Both, &Architecture::default()).expect("valid model");
    let q = gaussian_matrix(n, batch, 0.0, 1.0, &mut rng);
    let g = gaussian_matrix(n, batch, 0.0, 1.0, &mut rng);
    (model, q, g)
}
