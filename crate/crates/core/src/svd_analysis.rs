//! Low-rank estimation of a core feature matrix from a noisy observation
//! `Y = X + D`: SVD truncation, the least-squares projection estimate,
//! singular-value shrinkage, and a demonstration that the leading left
//! singular subspace of `Y` drifts away from that of `X` under noise.

use thiserror::Error;

use crate::numerics::{gaussian_matrix, orthonormal_complement, svd, DenseMatrix, NumericsError, Rng};

/// Condition threshold below which `Y` counts as rank deficient.
pub const RANK_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("rank {k} outside 1..={max}")]
    RankOutOfRange { k: usize, max: usize },
    #[error("matrix is rank deficient (sigma_min / sigma_max = {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
}

/// Best rank-`k` approximation `Σ_{i<=k} σ_i u_i v_iᵀ`.
pub fn truncated_approx(y: &DenseMatrix, k: usize) -> Result<DenseMatrix, AnalysisError> {
    let max = y.rows().min(y.cols());
    if k == 0 || k > max {
        return Err(AnalysisError::RankOutOfRange { k, max });
    }
    Ok(svd(y)?.reconstruct(k))
}

/// `Y (YᵀY)⁻¹ Yᵀ X`, evaluated through the normal equations.
pub fn projector_estimate(y: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix, AnalysisError> {
    check_projection_shapes(y, x)?;
    let s = svd(y)?.s;
    let ratio = s.last().copied().unwrap_or(0.0) / s[0].max(f64::MIN_POSITIVE);
    if ratio <= RANK_CUTOFF || y.cols() > y.rows() {
        return Err(AnalysisError::RankDeficient { ratio });
    }
    let yt = y.transpose();
    let gram = yt.matmul(y)?;
    let rhs = yt.matmul(x)?;
    let coeffs = solve(&gram, &rhs)?;
    Ok(y.matmul(&coeffs)?)
}

/// Projection onto the column space of `Y` via its pseudo-inverse; singular
/// directions with `σ <= RANK_CUTOFF · σ_max` are dropped.
pub fn projector_estimate_pinv(y: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix, AnalysisError> {
    check_projection_shapes(y, x)?;
    let dec = svd(y)?;
    let cutoff = RANK_CUTOFF * dec.s[0];
    let kept = dec.s.iter().take_while(|&&s| s > cutoff).count();
    if kept == 0 {
        return Ok(DenseMatrix::zeros(x.rows(), x.cols()));
    }
    let u = dec.u.columns(0, kept);
    Ok(u.matmul(&u.transpose().matmul(x)?)?)
}

fn check_projection_shapes(y: &DenseMatrix, x: &DenseMatrix) -> Result<(), AnalysisError> {
    if y.rows() != x.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "projector_estimate",
            left: y.shape(),
            right: x.shape(),
        }
        .into());
    }
    Ok(())
}

/// Gaussian elimination with partial pivoting for `A Z = B`, A square.
fn solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, AnalysisError> {
    let n = a.rows();
    let k = b.cols();
    let mut m = a.clone();
    let mut z = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))
            .expect("nonempty range");
        let pv = m.get(pivot, col);
        if pv == 0.0 {
            return Err(AnalysisError::RankDeficient { ratio: 0.0 });
        }
        if pivot != col {
            for j in 0..n {
                let t = m.get(col, j);
                m.set(col, j, m.get(pivot, j));
                m.set(pivot, j, t);
            }
            for j in 0..k {
                let t = z.get(col, j);
                z.set(col, j, z.get(pivot, j));
                z.set(pivot, j, t);
            }
        }
        for i in col + 1..n {
            let f = m.get(i, col) / pv;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m.set(i, j, m.get(i, j) - f * m.get(col, j));
            }
            for j in 0..k {
                z.set(i, j, z.get(i, j) - f * z.get(col, j));
            }
        }
    }
    for col in (0..n).rev() {
        let pv = m.get(col, col);
        for j in 0..k {
            let mut acc = z.get(col, j);
            for t in col + 1..n {
                acc -= m.get(col, t) * z.get(t, j);
            }
            z.set(col, j, acc / pv);
        }
    }
    Ok(z)
}

/// Shrinkage estimate `Σ_{k<=rank_x} ((σ_k² - σ_D²)/σ_k) u_k v_kᵀ` with
/// negative coefficients clamped to zero.
pub fn shrink(y: &DenseMatrix, sigma_d_sq: f64, rank_x: usize) -> Result<DenseMatrix, AnalysisError> {
    let max = y.rows().min(y.cols());
    if rank_x == 0 || rank_x > max {
        return Err(AnalysisError::RankOutOfRange { k: rank_x, max });
    }
    let mut dec = svd(y)?;
    for (k, s) in dec.s.iter_mut().enumerate() {
        *s = if k < rank_x { shrink_coefficient(*s, sigma_d_sq) } else { 0.0 };
    }
    Ok(dec.reconstruct(rank_x))
}

fn shrink_coefficient(sigma: f64, sigma_d_sq: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    ((sigma * sigma - sigma_d_sq) / sigma).max(0.0)
}

/// Block decomposition of `Y = X + D` along the principal (`V_x1`) and
/// complementary (`V_x2`) right subspaces of `X`:
///
/// `Y = P1 S1 Q1ᵀ V_x1ᵀ + (P1 C + P2 S2 Q2ᵀ) V_x2ᵀ`
///
/// where `P1 S1 Q1ᵀ = (X + D) V_x1` and `P2 S2 Q2ᵀ` is the SVD of the part of
/// `D V_x2` orthogonal to `P1`. The leftover coupling `C = P1ᵀ D V_x2` is
/// kept explicitly; the block-diagonal form is a true SVD only when it
/// vanishes.
#[derive(Clone, Debug)]
pub struct PerturbedDecomposition {
    pub p1: DenseMatrix,
    pub s1: Vec<f64>,
    pub q1: DenseMatrix,
    pub p2: DenseMatrix,
    pub s2: Vec<f64>,
    pub q2: DenseMatrix,
    pub coupling: DenseMatrix,
    pub u_x1: DenseMatrix,
    pub v_x1: DenseMatrix,
    pub v_x2: DenseMatrix,
}

impl PerturbedDecomposition {
    /// Builds the decomposition for an observed `X` of rank `rank_x` and
    /// perturbation `D` of the same shape.
    pub fn new(x: &DenseMatrix, d: &DenseMatrix, rank_x: usize) -> Result<Self, AnalysisError> {
        let (n_x, r) = x.shape();
        if d.shape() != x.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "perturbed decomposition",
                left: x.shape(),
                right: d.shape(),
            }
            .into());
        }
        if rank_x == 0 || rank_x >= n_x.min(r) {
            return Err(AnalysisError::InvalidDimensions(format!(
                "rank_x = {rank_x} must satisfy 0 < rank_x < min({n_x}, {r})"
            )));
        }
        let xd = svd(x)?;
        let u_x1 = xd.u.columns(0, rank_x);
        let v_x1 = xd.v.columns(0, rank_x);
        let v_x2 = orthonormal_complement(&v_x1, r - rank_x).expect("rank_x < r");

        let y = x.add(d)?;
        let block1 = y.matmul(&v_x1)?;
        let b1 = svd(&block1)?;
        let p1 = b1.u;

        let dv2 = d.matmul(&v_x2)?;
        let coupling = p1.transpose().matmul(&dv2)?;
        let residual = dv2.sub(&p1.matmul(&coupling)?)?;
        let b2 = svd(&residual)?;

        // Zero-σ left vectors of the residual block are arbitrary; rebuild
        // them orthogonal to P1 as well.
        let scale = b2.s[0].max(1.0);
        let live = b2.s.iter().take_while(|&&s| s > 1e-12 * scale).count();
        let p2 = if live == b2.s.len() {
            b2.u
        } else {
            let mut fixed = DenseMatrix::zeros(n_x, rank_x + live);
            for j in 0..rank_x {
                fixed.set_column(j, &p1.column(j));
            }
            for j in 0..live {
                fixed.set_column(rank_x + j, &b2.u.column(j));
            }
            let extra = orthonormal_complement(&fixed, b2.s.len() - live).ok_or_else(|| {
                AnalysisError::InvalidDimensions("no room for an orthogonal P2 block".into())
            })?;
            let mut p2 = DenseMatrix::zeros(n_x, b2.s.len());
            for j in 0..live {
                p2.set_column(j, &b2.u.column(j));
            }
            for j in 0..extra.cols() {
                p2.set_column(live + j, &extra.column(j));
            }
            p2
        };

        Ok(Self {
            p1,
            s1: b1.s,
            q1: b1.v,
            p2,
            s2: b2.s,
            q2: b2.v,
            coupling,
            u_x1,
            v_x1,
            v_x2,
        })
    }

    /// Reassembles `Y` from the blocks.
    pub fn reassemble(&self) -> Result<DenseMatrix, AnalysisError> {
        let first = self.p1.matmul(&scale_cols(&self.q1, &self.s1).transpose())?;
        let first = first.matmul(&self.v_x1.transpose())?;
        let second = self.p2.matmul(&scale_cols(&self.q2, &self.s2).transpose())?;
        let second = second.add(&self.p1.matmul(&self.coupling)?)?;
        let second = second.matmul(&self.v_x2.transpose())?;
        Ok(first.add(&second)?)
    }

    /// `‖P1ᵀ P2‖_F`.
    pub fn orthogonality_defect(&self) -> f64 {
        self.p1
            .transpose()
            .matmul(&self.p2)
            .expect("same row count")
            .frobenius_norm()
    }

    /// Largest principal angle between `span(P1)` and `span(U_x1)`.
    pub fn subspace_angle(&self) -> Result<f64, AnalysisError> {
        principal_angle(&self.p1, &self.u_x1)
    }
}

fn scale_cols(m: &DenseMatrix, s: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * s[j])
}

/// Largest principal angle (radians) between the column spaces of `a` and
/// `b`, computed from the sine side so small angles keep full precision.
pub fn principal_angle(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64, AnalysisError> {
    if a.rows() != b.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "principal_angle",
            left: a.shape(),
            right: b.shape(),
        }
        .into());
    }
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    if qa.cols() != qb.cols() {
        // Subspaces of different dimension are never equal.
        return Ok(std::f64::consts::FRAC_PI_2);
    }
    let residual = qa.sub(&qb.matmul(&qb.transpose().matmul(&qa)?)?)?;
    let sine = svd(&residual)?.s[0].min(1.0);
    Ok(sine.asin())
}

fn orthonormal_basis(m: &DenseMatrix) -> Result<DenseMatrix, AnalysisError> {
    let dec = svd(m)?;
    let cutoff = RANK_CUTOFF * dec.s[0];
    let kept = dec.s.iter().take_while(|&&s| s > cutoff).count().max(1);
    Ok(dec.u.columns(0, kept))
}

/// One trial: random rank-`rank_x` `X` (`n_x x r`), Gaussian `D` with the
/// given std, returns the largest principal angle between `span(P1)` and
/// `span(U_x1)`.
pub fn theorem1_demo(n_x: usize, r: usize, rank_x: usize, noise_std: f64, rng: &mut Rng) -> Result<f64, AnalysisError> {
    if rank_x == 0 || rank_x >= n_x.min(r) {
        return Err(AnalysisError::InvalidDimensions(format!(
            "rank_x = {rank_x} must satisfy 0 < rank_x < min({n_x}, {r})"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(AnalysisError::InvalidDimensions(format!("noise_std = {noise_std}")));
    }
    let left = gaussian_matrix(n_x, rank_x, 0.0, 1.0, rng);
    let right = gaussian_matrix(r, rank_x, 0.0, 1.0, rng);
    let x = left.matmul(&right.transpose())?;
    let d = gaussian_matrix(n_x, r, 0.0, noise_std, rng);
    PerturbedDecomposition::new(&x, &d, rank_x)?.subspace_angle()
}
