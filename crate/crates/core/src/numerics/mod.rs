//! Dense real matrix kernels: arithmetic, a deterministic SVD, norms and
//! seeded random generation.

mod matrix;
mod rng;
mod svd;

pub use matrix::DenseMatrix;
pub use rng::{gaussian_matrix, Rng};
pub use svd::{orthonormal_complement, svd, SvdResult, MAX_SWEEPS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("SVD did not converge within {sweeps} sweeps")]
    NonConvergence { sweeps: usize },
    #[error("invalid norm order {0}: must be finite and >= 1")]
    InvalidOrder(f64),
}

/// `Σ |v_i|^p`, the p-th power of the p-norm.
pub fn p_norm_pow(values: &[f64], p: f64) -> Result<f64, NumericsError> {
    if !p.is_finite() || p < 1.0 {
        return Err(NumericsError::InvalidOrder(p));
    }
    Ok(values.iter().map(|v| abs_pow(*v, p)).sum())
}

#[inline]
pub(crate) fn abs_pow(v: f64, p: f64) -> f64 {
    let a = v.abs();
    if p == 1.0 {
        a
    } else if p == 2.0 {
        a * a
    } else {
        a.powf(p)
    }
}
