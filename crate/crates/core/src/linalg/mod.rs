//! Dense row-major linear algebra: matrix arithmetic, SVD, QR, power iteration.
//!
//! Everything here is deterministic: identical inputs yield bit-identical
//! outputs, including the parallel matrix product (each output element is a
//! fixed-order sequential dot product regardless of thread count).

mod power;
mod qr;
mod svd;

pub use power::{power_iteration_sigma_max, PowerIteration};
pub use qr::{qr, QrFactors};
pub use svd::{svd, SvdFactors};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Errors from the dense kernels.
#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Dimension {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("decomposition did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("rank deficiency at column {col}: |R[{col}][{col}]| = {value:e} below threshold {threshold:e}")]
    RankDeficient {
        col: usize,
        value: f64,
        threshold: f64,
    },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

/// Matrices below this element count are multiplied on the calling thread.
const PAR_MATMUL_MIN_ELEMENTS: usize = 64 * 64;

impl<S: Scalar> DenseMatrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    /// Builds a matrix from a row-major data vector.
    ///
    /// Panics if `data.len() != rows * cols`; shape bugs at construction
    /// sites are programmer errors, not runtime conditions.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// Diagonal matrix from a vector.
    pub fn from_diag(diag: &[S]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<S> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// First non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.cols, p % self.cols))
    }

    pub fn ensure_finite(&self) -> Result<(), LinalgError> {
        match self.find_non_finite() {
            Some((row, col)) => Err(LinalgError::NonFinite { row, col }),
            None => Ok(()),
        }
    }

    pub fn frobenius_norm(&self) -> S {
        self.data
            .iter()
            .map(|v| *v * *v)
            .fold(S::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, v| acc.max(v.abs()))
    }

    pub fn scale(&self, factor: S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| *v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a + *b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a - *b)
                .collect(),
        }
    }

    /// `self += factor * other`, in place.
    pub fn axpy(&mut self, factor: S, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * *b;
        }
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len(), "matvec: dimension mismatch");
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .map(|(a, b)| *a * *b)
                    .fold(S::zero(), |acc, x| acc + x)
            })
            .collect()
    }

    /// Transposed matrix-vector product `self^T v`.
    pub fn matvec_t(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.rows, v.len(), "matvec_t: dimension mismatch");
        let mut out = vec![S::zero(); self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * *a;
            }
        }
        out
    }
}

impl<S: Scalar> std::ops::Index<(usize, usize)> for DenseMatrix<S> {
    type Output = S;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<S: Scalar> std::ops::IndexMut<(usize, usize)> for DenseMatrix<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Dot product with a fixed four-lane accumulation tree. The summation
/// order is deterministic (lane-strided, then a fixed reduction), just not
/// the left-to-right order; the lanes break the add-latency chain.
pub(crate) fn dot4<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dim_error<S: Scalar>(
    op: &'static str,
    a: &DenseMatrix<S>,
    b: &DenseMatrix<S>,
) -> LinalgError {
    LinalgError::Dimension {
        op,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}

/// Row-parallel product kernel. `rows_b_data` is `b` in row-major order with
/// `b_cols` columns; one output row is produced per row of `a`, each by a
/// fixed ascending-k accumulation, so results do not depend on thread count.
fn matmul_rows<S: Scalar>(
    out_row: &mut [S],
    a_row: &[S],
    b_data: &[S],
    b_cols: usize,
) {
    for (k, &aik) in a_row.iter().enumerate() {
        if aik == S::zero() {
            continue;
        }
        let b_row = &b_data[k * b_cols..(k + 1) * b_cols];
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

/// Standard matrix product `a * b`.
pub fn matmul<S: Scalar>(
    a: &DenseMatrix<S>,
    b: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>, LinalgError> {
    if a.cols != b.rows {
        return Err(dim_error("matmul", a, b));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    let b_cols = b.cols;
    if a.rows * b.cols >= PAR_MATMUL_MIN_ELEMENTS && a.rows > 1 && a.cols > 0 {
        out.data
            .par_chunks_mut(b_cols)
            .zip(a.data.par_chunks(a.cols))
            .for_each(|(out_row, a_row)| matmul_rows(out_row, a_row, &b.data, b_cols));
    } else {
        for i in 0..a.rows {
            let (a_row, out_row) = (a.row(i), i * b_cols);
            matmul_rows(&mut out.data[out_row..out_row + b_cols], a_row, &b.data, b_cols);
        }
    }
    Ok(out)
}

/// `a^T * b` without the caller materializing the transpose. Large products
/// transpose `a` internally and reuse the row-parallel kernel; the
/// accumulation order over k is ascending either way, so results are
/// identical.
pub fn matmul_tn<S: Scalar>(
    a: &DenseMatrix<S>,
    b: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>, LinalgError> {
    if a.rows != b.rows {
        return Err(dim_error("matmul_tn", a, b));
    }
    let (n, m) = (a.cols, b.cols);
    if n * m >= PAR_MATMUL_MIN_ELEMENTS && n > 1 {
        return matmul(&a.transpose(), b);
    }
    // out[i][j] = sum_k a[k][i] * b[k][j]; k outer keeps both reads
    // contiguous.
    let mut out = DenseMatrix::zeros(n, m);
    for k in 0..a.rows {
        let (a_row, b_row) = (a.row(k), b.row(k));
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == S::zero() {
                continue;
            }
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without the caller materializing the transpose. Large products
/// transpose `b` internally and reuse the row-parallel kernel.
pub fn matmul_nt<S: Scalar>(
    a: &DenseMatrix<S>,
    b: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>, LinalgError> {
    if a.cols != b.cols {
        return Err(dim_error("matmul_nt", a, b));
    }
    if a.rows * b.rows >= PAR_MATMUL_MIN_ELEMENTS && a.rows > 1 && a.cols > 0 {
        return matmul(a, &b.transpose());
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    let dot = |a_row: &[S], b_row: &[S]| -> S {
        a_row
            .iter()
            .zip(b_row)
            .map(|(x, y)| *x * *y)
            .fold(S::zero(), |acc, v| acc + v)
    };
    for i in 0..a.rows {
        for j in 0..b.rows {
            let v = dot(a.row(i), b.row(j));
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Frobenius norm; free function mirroring the operation surface.
pub fn frobenius_norm<S: Scalar>(a: &DenseMatrix<S>) -> S {
    a.frobenius_norm()
}

/// `||a^T a - I||_F`, the column-orthonormality residual.
pub fn orthonormality_residual<S: Scalar>(w: &DenseMatrix<S>) -> S {
    let gram = matmul_tn(w, w).expect("gram is always well-formed");
    let mut sum = S::zero();
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { S::one() } else { S::zero() };
            let d = gram[(i, j)] - target;
            sum += d * d;
        }
    }
    sum.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat64(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> DenseMatrix<f64> {
        DenseMatrix::from_fn(rows, cols, f)
    }

    #[test]
    fn identity_times_matrix_is_matrix() {
        let a = mat64(2, 3, |i, j| (i * 3 + j) as f64 + 0.5);
        let eye = DenseMatrix::<f64>::identity(2);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = DenseMatrix::from_rows(&[vec![0.0], vec![1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = DenseMatrix::<f64>::zeros(2, 3);
        let b = DenseMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &b),
            Err(LinalgError::Dimension { .. })
        ));
    }

    /// Independent oracle: naive triple loop in (i, j, k) order.
    fn matmul_oracle(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> DenseMatrix<f64> {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut state = 1u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let a = mat64(7, 5, |_, _| next());
        let b = mat64(5, 3, |_, _| next());
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        // Same ascending-k accumulation order on both paths: exact match.
        assert_eq!(got, want);
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(DenseMatrix::<f64>::zeros(4, 5).frobenius_norm(), 0.0);
        let i3 = DenseMatrix::<f64>::identity(3);
        assert!((i3.frobenius_norm() - 3f64.sqrt()).abs() < 1e-15);
        let v = DenseMatrix::from_rows(&[vec![3.0, 4.0]]);
        assert_eq!(v.frobenius_norm(), 5.0);
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = mat64(6, 4, |i, j| ((i * 31 + j * 7) % 13) as f64 - 6.0);
        let b = mat64(6, 5, |i, j| ((i * 17 + j * 3) % 11) as f64 - 5.0);
        let tn = matmul_tn(&a, &b).unwrap();
        let want = matmul(&a.transpose(), &b).unwrap();
        for (x, y) in tn.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = mat64(5, 6, |i, j| ((i * 5 + j) % 7) as f64);
        let nt = matmul_nt(&b, &c.transpose()).unwrap();
        let want = matmul(&b, &c).unwrap();
        for (x, y) in nt.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn matmul_is_deterministic(rows in 1usize..40, inner in 1usize..40, cols in 1usize..40, seed in 0u64..1000) {
            let mut state = seed.wrapping_add(1);
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            };
            let a = DenseMatrix::from_fn(rows, inner, |_, _| next());
            let b = DenseMatrix::from_fn(inner, cols, |_, _| next());
            let c1 = matmul(&a, &b).unwrap();
            let c2 = matmul(&a, &b).unwrap();
            prop_assert_eq!(c1, c2);
        }
    }
}
