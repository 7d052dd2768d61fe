//! Low-rank adapters over a frozen linear backbone.

use thiserror::Error;

use crate::numerics::{gaussian_matrix, DenseMatrix, NumericsError, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoraError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("rank {rank} exceeds min({m}, {n}) / 2")]
    RankTooLarge { m: usize, n: usize, rank: usize },
    #[error("adapter factors disagree: A is {a:?}, B is {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
}

/// Largest admissible adapter rank for an m x n weight.
pub fn max_rank(m: usize, n: usize) -> usize {
    m.min(n) / 2
}

/// `ΔW = A Bᵀ` with `A: m x r` and `B: n x r`. No α/r scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    a: DenseMatrix,
    b: DenseMatrix,
}

impl LoraAdapter {
    pub fn new(a: DenseMatrix, b: DenseMatrix) -> Result<Self, LoraError> {
        if a.cols() != b.cols() {
            return Err(LoraError::ShapeMismatch { a: a.shape(), b: b.shape() });
        }
        let (m, n, r) = (a.rows(), b.rows(), a.cols());
        if r > max_rank(m, n) {
            return Err(LoraError::RankTooLarge { m, n, rank: r });
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(NumericsError::NonFinite { index: 0 }.into());
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn into_parts(self) -> (DenseMatrix, DenseMatrix) {
        (self.a, self.b)
    }

    /// Multiply-adds performed by [`forward`] for a batch of `batch`
    /// columns: `W x` plus `Bᵀ x` plus `A (Bᵀ x)`.
    pub fn forward_op_count(&self, batch: usize) -> usize {
        let (m, n, r) = (self.output_dim(), self.input_dim(), self.rank());
        m * n * batch + r * n * batch + m * r * batch
    }
}

/// Frozen pretrained weight `W: m x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    w: DenseMatrix,
}

impl FrozenBackbone {
    pub fn new(w: DenseMatrix) -> Self {
        Self { w }
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }
}

pub fn merge(adapter: &LoraAdapter) -> DenseMatrix {
    adapter
        .a
        .matmul(&adapter.b.transpose())
        .expect("adapter factors share rank")
}

/// `(W + A Bᵀ) x`, evaluated as `W x + A (Bᵀ x)` so the m x n update is
/// never formed.
pub fn forward(backbone: &FrozenBackbone, adapter: &LoraAdapter, x: &DenseMatrix) -> Result<DenseMatrix, LoraError> {
    if adapter.output_dim() != backbone.output_dim() || adapter.input_dim() != backbone.input_dim() {
        return Err(NumericsError::ShapeMismatch {
            op: "lora forward",
            left: backbone.w.shape(),
            right: (adapter.output_dim(), adapter.input_dim()),
        }
        .into());
    }
    let base = backbone.w.matmul(x)?;
    let projected = adapter.b.transpose().matmul(x)?;
    let update = adapter.a.matmul(&projected)?;
    Ok(base.add(&update)?)
}

/// Standard LoRA start: `A ~ N(0, 1/r)`, `B = 0`.
pub fn init_adapter(m: usize, n: usize, r: usize, rng: &mut Rng) -> Result<LoraAdapter, LoraError> {
    if r == 0 || r > max_rank(m, n) {
        return Err(LoraError::RankTooLarge { m, n, rank: r });
    }
    let a = gaussian_matrix(m, r, 0.0, (1.0 / r as f64).sqrt(), rng);
    let b = DenseMatrix::zeros(n, r);
    LoraAdapter::new(a, b)
}

/// Wraps trained factors `(A', B')` as a plain adapter.
pub fn materialize(a_new: DenseMatrix, b_new: DenseMatrix) -> Result<LoraAdapter, LoraError> {
    LoraAdapter::new(a_new, b_new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::svd;
    use proptest::prelude::{prop_assert, proptest};

    fn unit(len: usize, at: usize) -> DenseMatrix {
        let mut v = DenseMatrix::zeros(len, 1);
        v.set(at, 0, 1.0);
        v
    }

    #[test]
    fn merge_examples() {
        let ad = LoraAdapter::new(DenseMatrix::zeros(4, 2), DenseMatrix::filled(5, 2, 3.0)).unwrap();
        assert_eq!(merge(&ad), DenseMatrix::zeros(4, 5));

        assert!(matches!(
            LoraAdapter::new(unit(1, 0), unit(3, 1)),
            Err(LoraError::RankTooLarge { .. })
        ));
        let ad = LoraAdapter::new(unit(4, 0), unit(4, 1)).unwrap();
        let mut expect = DenseMatrix::zeros(4, 4);
        expect.set(0, 1, 1.0);
        assert_eq!(merge(&ad), expect);
    }

    #[test]
    fn merged_update_has_rank_at_most_r() {
        let mut rng = Rng::new(5);
        let a = gaussian_matrix(4, 2, 0.0, 1.0, &mut rng);
        let b = gaussian_matrix(4, 2, 0.0, 1.0, &mut rng);
        let ad = LoraAdapter::new(a, b).unwrap();
        let s = svd(&merge(&ad)).unwrap().s;
        assert!(s[2] <= 1e-10, "{s:?}");
    }

    #[test]
    fn forward_examples() {
        let mut rng = Rng::new(2);
        let bb = FrozenBackbone::new(gaussian_matrix(6, 8, 0.0, 1.0, &mut rng));
        let x = gaussian_matrix(8, 5, 0.0, 1.0, &mut rng);
        let zero = LoraAdapter::new(DenseMatrix::zeros(6, 3), DenseMatrix::zeros(8, 3)).unwrap();
        assert_eq!(forward(&bb, &zero, &x).unwrap(), bb.weight().matmul(&x).unwrap());

        let ad = LoraAdapter::new(
            gaussian_matrix(6, 3, 0.0, 1.0, &mut rng),
            gaussian_matrix(8, 3, 0.0, 1.0, &mut rng),
        )
        .unwrap();
        assert_eq!(forward(&bb, &ad, &DenseMatrix::zeros(8, 5)).unwrap(), DenseMatrix::zeros(6, 5));
        let merged = bb.weight().add(&merge(&ad)).unwrap().matmul(&x).unwrap();
        assert!(forward(&bb, &ad, &x).unwrap().max_abs_diff(&merged) <= 1e-10);

        let wrong = FrozenBackbone::new(DenseMatrix::zeros(6, 7));
        assert!(forward(&wrong, &ad, &x).is_err());
    }

    #[test]
    fn init_adapter_examples() {
        let ad = init_adapter(8, 6, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(merge(&ad), DenseMatrix::zeros(8, 6));
        assert_eq!(
            init_adapter(8, 6, 4, &mut Rng::new(1)),
            Err(LoraError::RankTooLarge { m: 8, n: 6, rank: 4 })
        );
        let ad = init_adapter(100, 100, 8, &mut Rng::new(4)).unwrap();
        let vals = ad.a().as_slice();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!((0.06..=0.19).contains(&var), "variance {var}");
    }

    #[test]
    fn materialize_examples() {
        let ad = materialize(DenseMatrix::zeros(6, 2), DenseMatrix::zeros(5, 2)).unwrap();
        assert_eq!(merge(&ad), DenseMatrix::zeros(6, 5));
        assert!(matches!(
            materialize(DenseMatrix::zeros(6, 2), DenseMatrix::zeros(5, 3)),
            Err(LoraError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn materialized_adapter_costs_the_same_as_a_plain_one() {
        let plain = init_adapter(8, 32, 4, &mut Rng::new(0)).unwrap();
        let mat = materialize(DenseMatrix::filled(8, 4, 0.3), DenseMatrix::filled(32, 4, -0.1)).unwrap();
        assert_eq!(plain.forward_op_count(16), mat.forward_op_count(16));
    }

    proptest! {
        #[test]
        fn forward_is_linear(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let bb = FrozenBackbone::new(gaussian_matrix(4, 6, 0.0, 1.0, &mut rng));
            let ad = LoraAdapter::new(
                gaussian_matrix(4, 2, 0.0, 1.0, &mut rng),
                gaussian_matrix(6, 2, 0.0, 1.0, &mut rng),
            ).unwrap();
            let x1 = gaussian_matrix(6, 3, 0.0, 1.0, &mut rng);
            let x2 = gaussian_matrix(6, 3, 0.0, 1.0, &mut rng);
            let lhs = forward(&bb, &ad, &x1.add(&x2).unwrap()).unwrap();
            let rhs = forward(&bb, &ad, &x1).unwrap().add(&forward(&bb, &ad, &x2).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }

        #[test]
        fn merged_rank_bounded(seed in 0u64..500, r in 1usize..4) {
            let mut rng = Rng::new(seed);
            let ad = LoraAdapter::new(
                gaussian_matrix(8, r, 0.0, 1.0, &mut rng),
                gaussian_matrix(9, r, 0.0, 1.0, &mut rng),
            ).unwrap();
            let s = svd(&merge(&ad)).unwrap().s;
            prop_assert!(s[r] <= 1e-10 * s[0]);
        }
    }
}
