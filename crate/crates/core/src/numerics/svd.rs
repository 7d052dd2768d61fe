//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of a working copy are rotated pairwise until mutually orthogonal;
//! their norms are the singular values and the accumulated rotations form V.
//! Wide inputs are handled through the transpose.

use super::{DenseMatrix, NumericsError};

pub const MAX_SWEEPS: usize = 1000;

/// Pairs are treated as orthogonal once |<a_p, a_q>| <= TOL * |a_p| |a_q|.
const TOL: f64 = 1e-15;

/// Thin singular value decomposition `M = U diag(S) Vᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// rows(M) x k, orthonormal columns.
    pub u: DenseMatrix,
    /// Length k, nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// cols(M) x k, orthonormal columns.
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn rank_k(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) Vᵀ`, optionally keeping only the leading `k` triples.
    pub fn reconstruct(&self, k: usize) -> DenseMatrix {
        let k = k.min(self.s.len());
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = DenseMatrix::zeros(m, n);
        for t in 0..k {
            let s = self.s[t];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u.get(i, t) * s;
                if us == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = out.get(i, j) + us * self.v.get(j, t);
                    out.set(i, j, v);
                }
            }
        }
        out
    }
}

pub fn svd(m: &DenseMatrix) -> Result<SvdResult, NumericsError> {
    if !m.is_finite() {
        return Err(NumericsError::NonFinite {
            index: m.as_slice().iter().position(|v| !v.is_finite()).unwrap_or(0),
        });
    }
    if m.rows() >= m.cols() {
        let (a, s, v) = jacobi_tall(m)?;
        let left = normalize(a, &s);
        Ok(finish(left, s, v.into_iter().map(Some).collect(), m.shape()))
    } else {
        let (a, s, v) = jacobi_tall(&m.transpose())?;
        let right = normalize(a, &s);
        Ok(finish(v.into_iter().map(Some).collect(), s, right, m.shape()))
    }
}

/// Column-major working storage: `cols[j][i]`.
type Columns = Vec<Vec<f64>>;

fn to_columns(m: &DenseMatrix) -> Columns {
    (0..m.cols()).map(|j| m.column(j)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Requires rows >= cols. Returns the rotated columns (norms are the
/// singular values), the singular values, and the accumulated rotations.
fn jacobi_tall(m: &DenseMatrix) -> Result<(Columns, Vec<f64>, Columns), NumericsError> {
    let n = m.cols();
    let mut a = to_columns(m);
    let mut v = to_columns(&DenseMatrix::identity(n));

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(NumericsError::NonConvergence { sweeps: MAX_SWEEPS });
    }
    let s = a.iter().map(|c| norm(c)).collect();
    Ok((a, s, v))
}

/// Divides each rotated column by its norm; numerically null columns are
/// left for basis completion.
fn normalize(a: Columns, s: &[f64]) -> Vec<Option<Vec<f64>>> {
    let dim = a[0].len();
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = smax * (dim.max(a.len()) as f64) * f64::EPSILON;
    a.into_iter()
        .zip(s)
        .map(|(col, &sigma)| {
            (sigma > cutoff && sigma > 0.0).then(|| col.iter().map(|x| x / sigma).collect())
        })
        .collect()
}

/// Sorts triples, completes missing basis vectors and fixes signs.
fn finish(
    left: Vec<Option<Vec<f64>>>,
    s: Vec<f64>,
    right: Vec<Option<Vec<f64>>>,
    (rows_u, rows_v): (usize, usize),
) -> SvdResult {
    let k = s.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));

    let s_sorted: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    let u_cols = complete_basis(order.iter().map(|&i| left[i].clone()).collect(), rows_u);
    let v_cols = complete_basis(order.iter().map(|&i| right[i].clone()).collect(), rows_v);

    let mut out_u = DenseMatrix::zeros(rows_u, k);
    let mut out_v = DenseMatrix::zeros(rows_v, k);
    for t in 0..k {
        let mut uc = u_cols[t].clone();
        let mut vc = v_cols[t].clone();
        let pivot = uc
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best })
            .0;
        if uc[pivot] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
        out_u.set_column(t, &uc);
        out_v.set_column(t, &vc);
    }
    SvdResult {
        u: out_u,
        s: s_sorted,
        v: out_v,
    }
}

/// `count` orthonormal columns orthogonal to every column of `basis`
/// (which must already be orthonormal). Deterministic.
pub fn orthonormal_complement(basis: &DenseMatrix, count: usize) -> Option<DenseMatrix> {
    let dim = basis.rows();
    if count == 0 || basis.cols() + count > dim {
        return None;
    }
    let mut cols: Vec<Option<Vec<f64>>> = (0..basis.cols()).map(|j| Some(basis.column(j))).collect();
    cols.extend(std::iter::repeat_n(None, count));
    let done = complete_basis(cols, dim);
    let mut out = DenseMatrix::zeros(dim, count);
    for (t, c) in done[basis.cols()..].iter().enumerate() {
        out.set_column(t, c);
    }
    Some(out)
}

/// Fills `None` slots with unit vectors orthogonal to every other column,
/// drawn from the standard basis by largest residual.
fn complete_basis(mut cols: Vec<Option<Vec<f64>>>, dim: usize) -> Vec<Vec<f64>> {
    for t in 0..cols.len() {
        if cols[t].is_some() {
            continue;
        }
        let fixed: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut x = vec![0.0; dim];
            x[e] = 1.0;
            for _ in 0..2 {
                for f in &fixed {
                    let proj = dot(&x, f);
                    x.iter_mut().zip(f).for_each(|(xi, fi)| *xi -= proj * fi);
                }
            }
            let nx = norm(&x);
            if best.as_ref().is_none_or(|(bn, _)| nx > *bn + 1e-12) {
                best = Some((nx, x));
            }
        }
        let (nx, x) = best.expect("dimension is positive");
        cols[t] = Some(x.into_iter().map(|xi| xi / nx).collect());
    }
    cols.into_iter().map(|c| c.expect("completed")).collect()
}
