//! Thin SVD by one-sided (Hestenes) Jacobi rotations, and the pseudoinverse
//! and minimum-norm least squares built on it.
//!
//! Matrices here are small (a few hundred per side at most), so the
//! quadratic-per-sweep cost of Jacobi is fine and its accuracy on tiny
//! singular values is better than bidiagonalization.

use crate::error::{shape_err, Error, Result};

use super::matrix::{dot, DenseMatrix, DenseVector};

/// Relative singular-value cutoff used by [`least_squares`]: `eps * max(rows, cols)`.
pub fn default_rcond(rows: usize, cols: usize) -> f64 {
    f64::EPSILON * rows.max(cols).max(1) as f64
}

const MAX_SWEEPS: usize = 80;

/// `a = u * diag(s) * vt`, singular values in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    /// rows x k
    pub u: DenseMatrix,
    /// length k
    pub s: Vec<f64>,
    /// k x cols
    pub vt: DenseMatrix,
}

pub fn svd(a: &DenseMatrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    let (m, n) = a.shape();
    if m < n {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.vt.transpose(), s: t.s, vt: t.u.transpose() });
    }
    // Work on columns stored as rows: cols[j] is column j of A (length m).
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * (m as f64).sqrt();
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!("jacobi svd did not converge in {MAX_SWEEPS} sweeps")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = DenseMatrix::zeros(m, n);
    let mut vt = DenseMatrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > 0.0 {
            for r in 0..m {
                u.set(r, k, cols[j][r] / sigma);
            }
        }
        vt.row_mut(k).copy_from_slice(&v[j]);
    }
    Ok(Svd { u, s, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (xp, xq) = (&mut lo[p], &mut hi[0]);
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (ap, bq) = (*a, *b);
        *a = c * ap - s * bq;
        *b = s * ap + c * bq;
    }
}

/// Moore-Penrose pseudoinverse. Singular values below `tol * s_max` are
/// treated as zero.
pub fn pinv(a: &DenseMatrix, tol: f64) -> Result<DenseMatrix> {
    if !(tol >= 0.0) {
        return Err(Error::Domain(format!("pinv tolerance must be >= 0, got {tol}")));
    }
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(DenseMatrix::zeros(n, m));
    }
    let Svd { u, s, vt } = svd(a)?;
    let cutoff = tol * s.first().copied().unwrap_or(0.0);
    // A+ = V diag(1/s) U^T
    let mut out = DenseMatrix::zeros(n, m);
    for (k, &sigma) in s.iter().enumerate() {
        if sigma <= cutoff || sigma == 0.0 {
            continue;
        }
        let inv = 1.0 / sigma;
        for i in 0..n {
            let vik = vt.get(k, i) * inv;
            if vik == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o += vik * u.get(j, k);
            }
        }
    }
    Ok(out)
}

/// Minimum-norm least-squares solution `z+ t`.
pub fn least_squares(z: &DenseMatrix, t: &[f64]) -> Result<DenseVector> {
    if z.rows() != t.len() {
        return Err(shape_err!("least_squares: {} rows vs target of {}", z.rows(), t.len()));
    }
    pinv(z, default_rcond(z.rows(), z.cols()))?.matvec(t)
}
