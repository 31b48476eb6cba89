//! Thin SVD via one-sided Jacobi rotations, plus stable rank.
//!
//! One-sided Jacobi orthogonalizes the columns of the input by plane
//! rotations; column norms then read off the singular values. It is slow but
//! simple, unconditionally stable, and has no platform-dependent branches,
//! which is what the reproducibility contract needs.

use super::{dot, Matrix};
use crate::error::{Error, Result};

/// Largest `rows * cols` accepted by [`svd`].
pub const MAX_SVD_ELEMS: usize = 4096;

const MAX_SWEEPS: usize = 100;
const OFF_TOL: f64 = 1e-12;

/// Thin decomposition `A = U diag(s) V^T` with `r = min(rows, cols)`.
///
/// `u` is `rows x r`, `vt` is `r x cols`, and `singular_values` is length `r`,
/// sorted descending and non-negative.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let elems = a.rows() * a.cols();
    if elems == 0 {
        return Err(Error::Undefined { op: "svd", detail: "empty matrix".into() });
    }
    if elems > MAX_SVD_ELEMS {
        return Err(Error::TooLarge {
            op: "svd",
            rows: a.rows(),
            cols: a.cols(),
            elems,
            max: MAX_SVD_ELEMS,
        });
    }
    let transposed = a.rows() < a.cols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = (work.rows(), work.cols());

    // Column-major working copies of A and of the accumulated right factor V.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| work.get(i, j)).collect())
        .collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    let mut last_off = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        let mut max_off: f64 = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let app = dot(&cols[p], &cols[p]);
                let aqq = dot(&cols[q], &cols[q]);
                let apq = dot(&cols[p], &cols[q]);
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                let off = apq.abs() / (app * aqq).sqrt();
                max_off = max_off.max(off);
                if off <= OFF_TOL {
                    continue;
                }
                // Rotation angle that zeroes the (p, q) entry of the 2x2 Gram
                // block; the smaller root keeps the angle under 45 degrees.
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        last_off = max_off;
        if max_off <= OFF_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence { sweeps: MAX_SWEEPS, off: last_off });
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (out_j, &j) in order.iter().enumerate() {
        let sv = norms[j];
        s.push(sv);
        if sv > 0.0 {
            for i in 0..m {
                u.set(i, out_j, cols[j][i] / sv);
            }
        }
        for i in 0..n {
            v.set(i, out_j, vcols[j][i]);
        }
    }

    if transposed {
        // We factored A^T = U' S V'^T, so A = V' S U'^T.
        Ok(SvdResult { u: v, singular_values: s, vt: u.transpose() })
    } else {
        Ok(SvdResult { u, singular_values: s, vt: v.transpose() })
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Stable rank `||A||_F^2 / ||A||_2^2`. Always between 1 and rank(A).
pub fn stable_rank(a: &Matrix) -> Result<f64> {
    let fro2: f64 = a.data().iter().map(|v| v * v).sum();
    if fro2 == 0.0 {
        return Err(Error::Undefined { op: "stable_rank", detail: "zero matrix".into() });
    }
    let top = svd(a)?.singular_values[0];
    Ok(fro2 / (top * top))
}
