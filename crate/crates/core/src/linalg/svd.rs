//! Singular value decomposition via one-sided (Hestenes) Jacobi rotations.
//!
//! Column pairs of the working matrix are rotated until all pairwise column
//! inner products vanish relative to `||W||_F^2`; singular values are then the
//! column norms. Matrices with more columns than rows are decomposed through
//! their transpose. Accurate and unconditionally stable at the sizes this
//! toolkit targets (up to a few thousand entries per side).

use serde::{Deserialize, Serialize};

use super::{dot4, DenseMatrix, LinalgError};
use crate::scalar::Scalar;

/// Maximum number of Jacobi sweeps before reporting non-convergence.
const MAX_SWEEPS: usize = 60;

/// Relative off-diagonal tolerance: rotations stop once every column pair
/// satisfies |a_p . a_q| <= TOL * ||a_p|| * ||a_q||. Relative to the column
/// norms (not to ||W||_F) so the left singular vectors of *small* singular
/// values stay orthonormal too.
const OFF_DIAG_TOL: f64 = 1e-14;

/// Columns whose norm falls below `NULL_REL * ||W||_F` are rounding noise
/// from cancellation (rank-deficient input); they are frozen during sweeps
/// and reported as zero singular values. Without the freeze, pairs of noise
/// columns can stay correlated indefinitely under the relative criterion.
const NULL_REL: f64 = 1e-15;

/// Thin SVD `W = U diag(S) V^T` with `p = min(rows, cols)` columns in U and V.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdFactors<S> {
    /// Left singular vectors, `rows x p`, orthonormal columns.
    pub u: DenseMatrix<S>,
    /// Singular values, descending, nonnegative.
    pub s: Vec<S>,
    /// Right singular vectors, `cols x p`, orthonormal columns.
    pub v: DenseMatrix<S>,
}

impl<S: Scalar> SvdFactors<S> {
    /// Largest singular value (0 for empty spectra).
    pub fn sigma_max(&self) -> S {
        self.s.first().copied().unwrap_or_else(S::zero)
    }

    /// Reconstructs `U diag(S) V^T`.
    pub fn reconstruct(&self) -> DenseMatrix<S> {
        let p = self.s.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for j in 0..p {
                us[(i, j)] = us[(i, j)] * self.s[j];
            }
        }
        super::matmul_nt(&us, &self.v).expect("factor shapes agree")
    }
}

/// Tall matrices at least this much taller than wide are pre-reduced to
/// their square R factor before the Jacobi sweeps (sweep cost scales with
/// the row count).
const QR_PREREDUCE_RATIO: usize = 2;

/// Singular value decomposition. Deterministic: fixed sweep order, no
/// randomness; identical inputs give bit-identical factors.
pub fn svd<S: Scalar>(w: &DenseMatrix<S>) -> Result<SvdFactors<S>, LinalgError> {
    w.ensure_finite()?;
    if w.rows() >= w.cols() {
        svd_tall(w)
    } else {
        let f = svd_tall(&w.transpose())?;
        Ok(SvdFactors {
            u: f.v,
            s: f.s,
            v: f.u,
        })
    }
}

fn svd_tall<S: Scalar>(w: &DenseMatrix<S>) -> Result<SvdFactors<S>, LinalgError> {
    let (m, n) = w.shape();
    debug_assert!(m >= n);
    if n > 0 && m >= QR_PREREDUCE_RATIO * n {
        let (q, r) = super::qr::householder_thin(w);
        let inner = svd_square(&r)?;
        return Ok(SvdFactors {
            u: super::matmul(&q, &inner.u).expect("shapes compose"),
            s: inner.s,
            v: inner.v,
        });
    }
    svd_square(w)
}

/// One-sided Jacobi sweeps; `w` is m x n with m >= n (not necessarily
/// square despite the name; the QR pre-reduction just makes the common
/// case square).
fn svd_square<S: Scalar>(w: &DenseMatrix<S>) -> Result<SvdFactors<S>, LinalgError> {
    let (m, n) = w.shape();

    // Work on columns: a[j] is the j-th column of the evolving matrix.
    let mut a: Vec<Vec<S>> = (0..n).map(|j| w.col(j)).collect();
    let mut v: Vec<Vec<S>> = (0..n)
        .map(|j| {
            let mut e = vec![S::zero(); n];
            e[j] = S::one();
            e
        })
        .collect();

    let norm_sq = w.frobenius_norm().powi(2);
    let tol = S::from_f64_const(OFF_DIAG_TOL);
    let null_thr = S::from_f64_const(NULL_REL) * w.frobenius_norm();
    let null_thr_sq = null_thr * null_thr;

    let mut converged = n < 2 || norm_sq == S::zero();
    let mut last_residual = S::zero();
    let mut norms_sq = vec![S::zero(); n];
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        // Column squared norms, cached per sweep and updated by the exact
        // rotation identities below; refreshed each sweep against drift.
        for (j, col) in a.iter().enumerate() {
            norms_sq[j] = col.iter().map(|x| *x * *x).fold(S::zero(), |u, x| u + x);
        }
        let mut rotated = false;
        last_residual = S::zero();
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (app, aqq) = (norms_sq[p], norms_sq[q]);
                if app <= null_thr_sq || aqq <= null_thr_sq {
                    continue;
                }
                let apq = dot4(&a[p], &a[q]);
                let scale = (app * aqq).sqrt();
                last_residual = last_residual.max(apq.abs() / scale);
                if apq.abs() <= tol * scale {
                    continue;
                }
                rotated = true;
                // Jacobi rotation zeroing the (p, q) entry of the Gram matrix.
                let zeta = (aqq - app) / (apq + apq);
                let t = if zeta >= S::zero() {
                    S::one() / (zeta + (S::one() + zeta * zeta).sqrt())
                } else {
                    -S::one() / (-zeta + (S::one() + zeta * zeta).sqrt())
                };
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = c * t;
                let (ap, aq) = pair_mut(&mut a, p, q);
                for (x_ref, y_ref) in ap.iter_mut().zip(aq.iter_mut()) {
                    let (x, y) = (*x_ref, *y_ref);
                    *x_ref = c * x - s * y;
                    *y_ref = s * x + c * y;
                }
                let (vp, vq) = pair_mut(&mut v, p, q);
                for (x_ref, y_ref) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (x, y) = (*x_ref, *y_ref);
                    *x_ref = c * x - s * y;
                    *y_ref = s * x + c * y;
                }
                norms_sq[p] = app - t * apq;
                norms_sq[q] = aqq + t * apq;
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: last_residual.to_f64().unwrap_or(f64::NAN),
        });
    }

    // Column norms are the singular values; sort descending (stable, ties
    // keep sweep order, so output is deterministic).
    let mut norms: Vec<S> = a
        .iter()
        .map(|col| {
            col.iter()
                .map(|x| *x * *x)
                .fold(S::zero(), |acc, x| acc + x)
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let mut u = DenseMatrix::zeros(m, n);
    let mut vt = DenseMatrix::zeros(n, n);
    let mut s_out = vec![S::zero(); n];
    let mut null_slots = Vec::new();
    for (slot, &src) in order.iter().enumerate() {
        s_out[slot] = norms[src];
        for i in 0..n {
            vt[(i, slot)] = v[src][i];
        }
        // The rotation criterion keeps even tiny columns relatively
        // orthogonal; only noise-floor columns need basis completion.
        if norms[src] > null_thr {
            let inv = S::one() / norms[src];
            for i in 0..m {
                u[(i, slot)] = a[src][i] * inv;
            }
        } else {
            norms[src] = S::zero();
            s_out[slot] = S::zero();
            null_slots.push(slot);
        }
    }
    if !null_slots.is_empty() {
        complete_orthonormal_columns(&mut u, &null_slots);
    }

    Ok(SvdFactors { u, s: s_out, v: vt })
}

/// Disjoint mutable borrows of two buffer entries (`p < q`).
fn pair_mut<T>(items: &mut [T], p: usize, q: usize) -> (&mut T, &mut T) {
    debug_assert!(p < q);
    let (lo, hi) = items.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

/// Fills the listed columns of `u` with vectors orthonormal to all other
/// columns, by Gram-Schmidt against candidate standard basis vectors.
/// Deterministic: candidates are tried in index order.
fn complete_orthonormal_columns<S: Scalar>(u: &mut DenseMatrix<S>, slots: &[usize]) {
    let (m, n) = u.shape();
    let filled: Vec<usize> = (0..n).filter(|j| !slots.contains(j)).collect();
    let mut done: Vec<usize> = filled;
    let half = S::from_f64_const(0.5);
    for &slot in slots {
        let mut chosen = None;
        for cand in 0..m {
            let mut vec = vec![S::zero(); m];
            vec[cand] = S::one();
            // Two rounds of orthogonalization for numerical hygiene.
            for _ in 0..2 {
                for &j in &done {
                    let dot = (0..m)
                        .map(|i| vec[i] * u[(i, j)])
                        .fold(S::zero(), |a, b| a + b);
                    for (i, item) in vec.iter_mut().enumerate() {
                        *item = *item - dot * u[(i, j)];
                    }
                }
            }
            let norm = vec
                .iter()
                .map(|x| *x * *x)
                .fold(S::zero(), |a, b| a + b)
                .sqrt();
            if norm > half {
                let inv = S::one() / norm;
                for (i, item) in vec.iter().enumerate() {
                    u[(i, slot)] = *item * inv;
                }
                chosen = Some(());
                break;
            }
        }
        // By dimension counting some basis vector always has residual norm
        // >= sqrt(1 - (n-1)/m) ... but guard anyway.
        assert!(chosen.is_some(), "failed to complete orthonormal basis");
        done.push(slot);
    }
}
