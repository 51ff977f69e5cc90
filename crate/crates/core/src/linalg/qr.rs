//! Thin QR decomposition via Householder reflections, with the diagonal of R
//! sign-fixed nonnegative so that Q is unique for full-column-rank input.

use serde::{Deserialize, Serialize};

use super::{dot4, DenseMatrix, LinalgError};
use crate::scalar::Scalar;

/// Columns whose remaining diagonal magnitude falls below
/// `RANK_TOL * ||W||_F` make the input rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Thin factors `W = Q R` with `Q` m x n (orthonormal columns, m >= n) and
/// `R` n x n upper triangular with nonnegative diagonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QrFactors<S> {
    pub q: DenseMatrix<S>,
    pub r: DenseMatrix<S>,
}

/// Unchecked thin Householder factorization: `w = q r` with orthonormal-
/// column `q` (m x n) and upper-triangular `r` (n x n, diagonal of either
/// sign). Handles rank-deficient input; used directly by the SVD's
/// tall-matrix pre-reduction.
///
/// Works on the transpose internally so every reflector touches contiguous
/// memory (the columns of `w` are rows of the working buffer).
pub(crate) fn householder_thin<S: Scalar>(
    w: &DenseMatrix<S>,
) -> (DenseMatrix<S>, DenseMatrix<S>) {
    let (m, n) = w.shape();
    debug_assert!(m >= n);
    // wt[j] is the j-th column of the evolving R.
    let mut wt = w.transpose();
    let mut reflectors: Vec<Vec<S>> = Vec::with_capacity(n);
    let two = S::one() + S::one();

    for k in 0..n {
        let head = wt[(k, k)];
        let norm = wt.row(k)[k..]
            .iter()
            .map(|x| *x * *x)
            .fold(S::zero(), |a, b| a + b)
            .sqrt();
        let alpha = if head >= S::zero() { -norm } else { norm };
        let mut v = wt.row(k)[k..].to_vec();
        v[0] = head - alpha;
        let v_norm_sq = v.iter().map(|x| *x * *x).fold(S::zero(), |a, b| a + b);
        if v_norm_sq > S::zero() {
            for j in k..n {
                let row = &mut wt.row_mut(j)[k..];
                let coef = two * dot4(&v, row) / v_norm_sq;
                for (cell, vi) in row.iter_mut().zip(&v) {
                    *cell = *cell - coef * *vi;
                }
            }
        }
        let row_k = wt.row_mut(k);
        row_k[k] = alpha;
        for cell in &mut row_k[k + 1..] {
            *cell = S::zero();
        }
        reflectors.push(v);
    }

    // Form Q^T by applying the reflectors in reverse to the n x m identity
    // slab, then transpose once at the end.
    let mut qt = DenseMatrix::zeros(n, m);
    for j in 0..n {
        qt[(j, j)] = S::one();
    }
    for k in (0..n).rev() {
        let v = &reflectors[k];
        let v_norm_sq = v.iter().map(|x| *x * *x).fold(S::zero(), |a, b| a + b);
        if v_norm_sq == S::zero() {
            continue;
        }
        for j in 0..n {
            let row = &mut qt.row_mut(j)[k..];
            let coef = two * dot4(v, row) / v_norm_sq;
            for (cell, vi) in row.iter_mut().zip(v) {
                *cell = *cell - coef * *vi;
            }
        }
    }

    let mut r = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r[(i, j)] = wt[(j, i)];
        }
    }
    (qt.transpose(), r)
}

/// Householder QR for `w` with `rows >= cols`.
pub fn qr<S: Scalar>(w: &DenseMatrix<S>) -> Result<QrFactors<S>, LinalgError> {
    let (m, n) = w.shape();
    assert!(m >= n, "qr requires rows >= cols, got {m}x{n}");
    w.ensure_finite()?;

    let (mut q, mut r) = householder_thin(w);
    let rank_threshold = S::from_f64_const(RANK_TOL) * w.frobenius_norm();
    for k in 0..n {
        if r[(k, k)].abs() <= rank_threshold {
            return Err(LinalgError::RankDeficient {
                col: k,
                value: r[(k, k)].abs().to_f64().unwrap_or(f64::NAN),
                threshold: rank_threshold.to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    // Fix signs so diag(R) >= 0, making Q unique.
    for i in 0..n {
        if r[(i, i)] < S::zero() {
            for j in 0..n {
                r[(i, j)] = -r[(i, j)];
            }
            for row in 0..m {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }

    Ok(QrFactors { q, r })
}
