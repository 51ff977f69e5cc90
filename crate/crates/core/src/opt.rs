//! Orthogonality mechanisms for weight matrices: orthogonal initialization,
//! singular value bounding (hard projection), Stiefel-manifold tangent
//! projection and QR retraction, and the two soft spectral penalties.
//!
//! The SGD-with-momentum step that composes these with a network lives in
//! [`crate::train`]; the functions here are pure matrix-level primitives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    self, matmul, matmul_nt, matmul_tn, power_iteration_sigma_max, qr, svd, DenseMatrix,
    LinalgError,
};
use crate::rng::Stream;
use crate::scalar::Scalar;

/// A weight matrix is accepted as "on the Stiefel manifold" when its
/// orthonormality residual is below this.
const MANIFOLD_TOL: f64 = 1e-6;

/// Relative tolerance of the SRIP power iteration.
const SRIP_PI_TOL: f64 = 1e-9;

/// Which orthogonality mechanism the optimizer applies to weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OrthoMode {
    /// Plain momentum SGD.
    None,
    /// Singular value bounding: every `period` steps, clamp all singular
    /// values of every weight matrix into [1/(1+eps), 1+eps].
    Svb { epsilon: f64, period: usize },
    /// Strict orthogonality: tangent-space projected gradients with QR
    /// retraction after every step.
    Stiefel,
    /// Frobenius penalty lambda * ||W^T W - I||_F^2 added to the loss.
    Soft { lambda: f64 },
    /// Spectral penalty kappa * sigma_max(W^T W - I), approximated by
    /// power iteration.
    Srip { kappa: f64, pi_iters: usize },
}

impl OrthoMode {
    pub fn validate(&self) -> Result<(), OptError> {
        match *self {
            OrthoMode::Svb { epsilon, period } => {
                if epsilon < 0.0 {
                    return Err(OptError::BadParameter("svb epsilon must be >= 0"));
                }
                if period == 0 {
                    return Err(OptError::BadParameter("svb period must be >= 1"));
                }
            }
            OrthoMode::Soft { lambda } if lambda < 0.0 => {
                return Err(OptError::BadParameter("soft lambda must be >= 0"));
            }
            OrthoMode::Srip { kappa, pi_iters } => {
                if kappa < 0.0 {
                    return Err(OptError::BadParameter("srip kappa must be >= 0"));
                }
                if pi_iters == 0 {
                    return Err(OptError::BadParameter("srip pi_iters must be >= 1"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OptError {
    #[error("invalid parameter: {0}")]
    BadParameter(&'static str),
    #[error("matrix is off the Stiefel manifold: ||W^T W - I||_F = {residual:e} (tolerance {tolerance:e})")]
    ManifoldViolation { residual: f64, tolerance: f64 },
    #[error("retraction failed, the stepped matrix is rank deficient (try a smaller step): {0}")]
    Retraction(#[source] LinalgError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Orthogonal (or row/column-orthonormal) matrix from the Q factor of a
/// seeded Gaussian matrix. For `rows >= cols`, `W^T W = I`; otherwise
/// `W W^T = I`. All singular values are exactly 1 up to rounding.
pub fn orthogonal_init<S: Scalar>(rows: usize, cols: usize, seed: u64) -> DenseMatrix<S> {
    assert!(rows >= 1 && cols >= 1, "degenerate shape {rows}x{cols}");
    let (m, n, transpose) = if rows >= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut stream = Stream::new(seed);
    let gauss: DenseMatrix<S> =
        DenseMatrix::from_fn(m, n, |_, _| S::from_f64_const(stream.normal_f64()));
    // A Gaussian matrix is full rank with probability 1; regenerate on the
    // measure-zero failure rather than aborting.
    let q = match qr(&gauss) {
        Ok(f) => f.q,
        Err(_) => {
            let mut retry = Stream::substream(seed, 0xDEAD);
            let g: DenseMatrix<S> =
                DenseMatrix::from_fn(m, n, |_, _| S::from_f64_const(retry.normal_f64()));
            qr(&g).expect("second Gaussian draw is full rank").q
        }
    };
    if transpose {
        q.transpose()
    } else {
        q
    }
}

/// Clamps every singular value of `w` into `[1/(1+epsilon), 1+epsilon]` and
/// recomposes with the original singular vectors.
pub fn svb_project<S: Scalar>(
    w: &DenseMatrix<S>,
    epsilon: S,
) -> Result<DenseMatrix<S>, OptError> {
    let f = svd(w)?;
    let hi = S::one() + epsilon;
    let lo = S::one() / hi;
    let clamped: Vec<S> = f.s.iter().map(|&s| s.min(hi).max(lo)).collect();
    let mut us = f.u.clone();
    for i in 0..us.rows() {
        for (j, &c) in clamped.iter().enumerate() {
            us[(i, j)] = us[(i, j)] * c;
        }
    }
    Ok(matmul_nt(&us, &f.v)?)
}

/// Projects an embedding-space gradient `g` onto the tangent space of the
/// Stiefel manifold at `w` (rows >= cols, orthonormal columns):
/// `P_W(G) = (I - W W^T) G + 1/2 W (W^T G - G^T W)`.
pub fn stiefel_tangent_project<S: Scalar>(
    w: &DenseMatrix<S>,
    g: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>, OptError> {
    assert!(
        w.rows() >= w.cols(),
        "tangent projection expects a tall matrix"
    );
    assert_eq!(w.shape(), g.shape(), "gradient shape mismatch");
    let residual = linalg::orthonormality_residual(w);
    let tolerance = S::from_f64_const(MANIFOLD_TOL);
    if residual > tolerance {
        return Err(OptError::ManifoldViolation {
            residual: residual.to_f64().unwrap_or(f64::NAN),
            tolerance: MANIFOLD_TOL,
        });
    }
    // (I - W W^T) G computed as G - W (W^T G) to stay O(m n^2).
    let wtg = matmul_tn(w, g)?;
    let mut z = g.clone();
    z.axpy(-S::one(), &matmul(w, &wtg)?);
    // + 1/2 W (W^T G - G^T W); note G^T W = (W^T G)^T.
    let mut skew = wtg.clone();
    skew.axpy(-S::one(), &wtg.transpose());
    z.axpy(S::from_f64_const(0.5), &matmul(w, &skew)?);
    Ok(z)
}

/// `||W^T Z + Z^T W||_F`, the tangency residual of `z` at `w`.
pub fn tangency_residual<S: Scalar>(w: &DenseMatrix<S>, z: &DenseMatrix<S>) -> S {
    let wtz = matmul_tn(w, z).expect("shapes agree");
    let mut sym = wtz.clone();
    sym.axpy(S::one(), &wtz.transpose());
    sym.frobenius_norm()
}

/// Retraction onto the Stiefel manifold: the sign-fixed Q factor of
/// `w + step`. With the nonnegative-diagonal convention this is the unique
/// orthonormal factor, so retracting a zero step returns `w` itself.
pub fn stiefel_retract<S: Scalar>(
    w: &DenseMatrix<S>,
    step: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>, OptError> {
    assert_eq!(w.shape(), step.shape(), "step shape mismatch");
    let stepped = w.add(step);
    match qr(&stepped) {
        Ok(f) => Ok(f.q),
        Err(e @ LinalgError::RankDeficient { .. }) => Err(OptError::Retraction(e)),
        Err(e) => Err(OptError::Linalg(e)),
    }
}

/// Value and gradient of the soft orthonormality penalty
/// `lambda * ||W^T W - I||_F^2` (or `W W^T` for wide matrices).
pub fn soft_ortho_penalty<S: Scalar>(
    w: &DenseMatrix<S>,
    lambda: S,
) -> (S, DenseMatrix<S>) {
    let wide = w.rows() < w.cols();
    let mut gram = if wide {
        matmul_nt(w, w).expect("gram")
    } else {
        matmul_tn(w, w).expect("gram")
    };
    for i in 0..gram.rows() {
        gram[(i, i)] = gram[(i, i)] - S::one();
    }
    let value = lambda * gram.frobenius_norm().powi(2);
    let four = S::from_f64_const(4.0);
    let grad = if wide {
        // d/dW ||W W^T - I||_F^2 = 4 (W W^T - I) W
        matmul(&gram, w).expect("grad").scale(four * lambda)
    } else {
        // d/dW ||W^T W - I||_F^2 = 4 W (W^T W - I)
        matmul(w, &gram).expect("grad").scale(four * lambda)
    };
    (value, grad)
}

/// Result of the SRIP penalty evaluation.
#[derive(Debug, Clone)]
pub struct SripPenalty<S> {
    pub value: S,
    pub grad: DenseMatrix<S>,
    /// False when the power iteration hit its budget; the value and gradient
    /// are still the best available estimates.
    pub converged: bool,
}

/// Spectral penalty `kappa * sigma_max(W^T W - I)` with its gradient,
/// both assembled from the dominant eigenpair of the symmetric matrix
/// `A = W^T W - I` found by power iteration.
///
/// At `A = 0` (orthonormal `w`) the spectral norm is at its floor and not
/// differentiable; value and gradient are defined as zero there.
pub fn srip_penalty<S: Scalar>(
    w: &DenseMatrix<S>,
    kappa: S,
    pi_iters: usize,
) -> SripPenalty<S> {
    let mut a = matmul_tn(w, w).expect("gram");
    for i in 0..a.rows() {
        a[(i, i)] = a[(i, i)] - S::one();
    }
    let floor = S::from_f64_const(1e-12) * S::from_f64_const(a.rows().max(1) as f64);
    if a.frobenius_norm() <= floor {
        return SripPenalty {
            value: S::zero(),
            grad: DenseMatrix::zeros(w.rows(), w.cols()),
            converged: true,
        };
    }
    // For symmetric A, iterating v <- normalize(A^T (A v)) converges to the
    // eigenvector of the dominant |eigenvalue|, which is sigma_max(A).
    let pi = power_iteration_sigma_max(&a, S::from_f64_const(SRIP_PI_TOL), pi_iters);
    let v = pi.vector;
    // Signed Rayleigh quotient s = v^T A v; sigma_max = |s| at convergence.
    let av = a.matvec(&v);
    let s: S = v
        .iter()
        .zip(&av)
        .map(|(x, y)| *x * *y)
        .fold(S::zero(), |acc, x| acc + x);
    let value = kappa * s.abs();
    // d sigma_max / dW = sign(s) * 2 W v v^T.
    let sign = if s >= S::zero() { S::one() } else { -S::one() };
    let wv = w.matvec(&v);
    let two_kappa_sign = (S::one() + S::one()) * kappa * sign;
    let grad = DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| two_kappa_sign * wv[i] * v[j]);
    SripPenalty {
        value,
        grad,
        converged: pi.converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormality_residual;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed.wrapping_add(0x9E3779B97F4A7C15);
        move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f64> {
        let mut next = lcg(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| next())
    }

    #[test]
    fn orthogonal_init_square_tall_fat() {
        let sq: DenseMatrix<f64> = orthogonal_init(3, 3, 1);
        assert!(orthonormality_residual(&sq) < 1e-10);

        let tall: DenseMatrix<f64> = orthogonal_init(5, 2, 2);
        assert!(orthonormality_residual(&tall) < 1e-10);

        let fat: DenseMatrix<f64> = orthogonal_init(2, 5, 3);
        assert!(orthonormality_residual(&fat.transpose()) < 1e-10);
    }

    #[test]
    fn orthogonal_init_unit_spectrum() {
        let w: DenseMatrix<f64> = orthogonal_init(6, 4, 9);
        let f = svd(&w).unwrap();
        for s in f.s {
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_init_deterministic() {
        let a: DenseMatrix<f64> = orthogonal_init(4, 4, 42);
        let b: DenseMatrix<f64> = orthogonal_init(4, 4, 42);
        assert_eq!(a, b);
        let c: DenseMatrix<f64> = orthogonal_init(4, 4, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn svb_clamp_arithmetic() {
        // Diagonal matrix makes the clamped spectrum directly visible.
        let w = DenseMatrix::from_diag(&[1.2f64, 0.9, 1.0]);
        let out = svb_project(&w, 0.05).unwrap();
        let s = svd(&out).unwrap().s;
        assert!((s[0] - 1.05).abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!((s[2] - 1.0 / 1.05).abs() < 1e-12);
    }

    #[test]
    fn svb_in_band_is_identity() {
        let w = DenseMatrix::from_diag(&[1.02, 0.98]);
        let out = svb_project(&w, 0.05).unwrap();
        assert!(out.sub(&w).frobenius_norm() < 1e-10);
    }

    #[test]
    fn svb_idempotent_and_banded() {
        let w = rand_mat(6, 4, 5).scale(2.0);
        let eps = 0.05;
        let once = svb_project(&w, eps).unwrap();
        let twice = svb_project(&once, eps).unwrap();
        assert!(twice.sub(&once).frobenius_norm() <= 1e-9);
        let s = svd(&once).unwrap().s;
        for v in s {
            assert!(v <= 1.0 + eps + 1e-8 && v >= 1.0 / (1.0 + eps) - 1e-8, "sigma {v}");
        }
    }

    #[test]
    fn svb_preserves_nondegenerate_singular_vectors() {
        let w = DenseMatrix::from_diag(&[3.0, 2.0, 0.4]);
        let f_in = svd(&w).unwrap();
        let out = svb_project(&w, 0.1).unwrap();
        let f_out = svd(&out).unwrap();
        for j in 0..3 {
            let dot: f64 = (0..3).map(|i| f_in.u[(i, j)] * f_out.u[(i, j)]).sum();
            assert!(dot.abs() > 1.0 - 1e-6, "U column {j} moved: |dot| = {}", dot.abs());
            let dot: f64 = (0..3).map(|i| f_in.v[(i, j)] * f_out.v[(i, j)]).sum();
            assert!(dot.abs() > 1.0 - 1e-6, "V column {j} moved");
        }
    }

    #[test]
    fn tangent_projection_at_identity() {
        let eye = DenseMatrix::<f64>::identity(3);
        // Symmetric gradient projects to zero.
        let sym = DenseMatrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![2.0, 5.0, 6.0],
            vec![3.0, 6.0, 9.0],
        ]);
        let z = stiefel_tangent_project(&eye, &sym).unwrap();
        assert!(z.frobenius_norm() < 1e-14);
        // Skew-symmetric gradient is already tangent.
        let skew = DenseMatrix::from_rows(&[
            vec![0.0, 2.0, -3.0],
            vec![-2.0, 0.0, 1.0],
            vec![3.0, -1.0, 0.0],
        ]);
        let z = stiefel_tangent_project(&eye, &skew).unwrap();
        assert!(z.sub(&skew).frobenius_norm() < 1e-14);
    }

    #[test]
    fn tangent_projection_tangency_residual() {
        for seed in 0..20u64 {
            let w: DenseMatrix<f64> = orthogonal_init(8, 5, seed);
            let g = rand_mat(8, 5, seed + 100);
            let z = stiefel_tangent_project(&w, &g).unwrap();
            assert!(tangency_residual(&w, &z) <= 1e-10);
        }
    }

    #[test]
    fn tangent_projection_rejects_off_manifold() {
        let w = DenseMatrix::from_diag(&[2.0, 1.0]);
        let g = DenseMatrix::<f64>::identity(2);
        match stiefel_tangent_project(&w, &g) {
            Err(OptError::ManifoldViolation { residual, .. }) => assert!(residual > 1.0),
            other => panic!("expected manifold violation, got {other:?}"),
        }
    }

    #[test]
    fn retract_zero_step_returns_w() {
        let w: DenseMatrix<f64> = orthogonal_init(6, 3, 4);
        let out = stiefel_retract(&w, &DenseMatrix::zeros(6, 3)).unwrap();
        assert!(out.sub(&w).frobenius_norm() < 1e-13);
    }

    #[test]
    fn retract_small_skew_matches_exponential() {
        // Matrix exponential oracle (truncated series, converges fast for
        // small arguments).
        fn expm(a: &DenseMatrix<f64>) -> DenseMatrix<f64> {
            let n = a.rows();
            let mut acc = DenseMatrix::<f64>::identity(n);
            let mut term = DenseMatrix::<f64>::identity(n);
            for k in 1..20 {
                term = matmul(&term, a).unwrap().scale(1.0 / k as f64);
                acc.axpy(1.0, &term);
            }
            acc
        }
        let k_skew = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let eye = DenseMatrix::<f64>::identity(2);
        for eps in [1e-2, 1e-3] {
            let step = k_skew.scale(eps);
            let out = stiefel_retract(&eye, &step).unwrap();
            assert!(orthonormality_residual(&out) < 1e-12);
            let lin_err = out.sub(&eye.add(&step)).frobenius_norm();
            assert!(lin_err <= 5.0 * eps * eps, "eps {eps}: linear error {lin_err:e}");
            let exp_err = out.sub(&expm(&step)).frobenius_norm();
            assert!(exp_err <= 5.0 * eps * eps, "eps {eps}: exp error {exp_err:e}");
        }
    }

    #[test]
    fn retract_lands_on_manifold() {
        for seed in 0..10u64 {
            let w: DenseMatrix<f64> = orthogonal_init(9, 4, seed);
            let step = rand_mat(9, 4, seed + 55).scale(0.1);
            let out = stiefel_retract(&w, &step).unwrap();
            assert!(orthonormality_residual(&out) <= 1e-10);
        }
    }

    #[test]
    fn soft_penalty_values() {
        let w: DenseMatrix<f64> = orthogonal_init(5, 3, 8);
        let (value, grad) = soft_ortho_penalty(&w, 1.0);
        assert!(value < 1e-18);
        assert!(grad.frobenius_norm() < 1e-9);

        let w2 = DenseMatrix::<f64>::identity(2).scale(2.0);
        let lambda = 0.7;
        let (value, grad) = soft_ortho_penalty(&w2, lambda);
        assert!((value - lambda * 18.0).abs() < 1e-12);
        let want = DenseMatrix::<f64>::identity(2).scale(24.0 * lambda);
        assert!(grad.sub(&want).frobenius_norm() < 1e-12);
    }

    fn finite_diff_penalty(
        w: &DenseMatrix<f64>,
        f: impl Fn(&DenseMatrix<f64>) -> f64,
    ) -> DenseMatrix<f64> {
        let h = 1e-6;
        let mut g = DenseMatrix::zeros(w.rows(), w.cols());
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let mut wp = w.clone();
                wp[(i, j)] += h;
                let mut wm = w.clone();
                wm[(i, j)] -= h;
                g[(i, j)] = (f(&wp) - f(&wm)) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn soft_penalty_gradient_matches_finite_differences() {
        for seed in [1u64, 2, 3] {
            for (m, n) in [(5, 3), (3, 5), (4, 4)] {
                let w = rand_mat(m, n, seed);
                let lambda = 0.3;
                let (_, grad) = soft_ortho_penalty(&w, lambda);
                let fd = finite_diff_penalty(&w, |x| soft_ortho_penalty(x, lambda).0);
                let denom = grad.frobenius_norm().max(1.0);
                let err = grad.sub(&fd).frobenius_norm() / denom;
                assert!(err <= 1e-6, "{m}x{n} seed {seed}: rel err {err:e}");
            }
        }
    }

    #[test]
    fn srip_value_examples() {
        let w = DenseMatrix::<f64>::identity(2).scale(2.0);
        let p = srip_penalty(&w, 1.0, 200);
        assert!((p.value - 3.0).abs() < 1e-6);

        let q: DenseMatrix<f64> = orthogonal_init(4, 4, 17);
        let p = srip_penalty(&q, 1.0, 200);
        assert!(p.value < 1e-9);
        assert!(p.grad.frobenius_norm() == 0.0);
    }

    #[test]
    fn srip_matches_svd_oracle_and_finite_differences() {
        for seed in [11u64, 12, 13] {
            let w = rand_mat(5, 4, seed);
            let kappa = 0.4;
            let p = srip_penalty(&w, kappa, 5000);
            assert!(p.converged);
            // Full-SVD oracle for sigma_max(W^T W - I).
            let mut a = matmul_tn(&w, &w).unwrap();
            for i in 0..a.rows() {
                a[(i, i)] -= 1.0;
            }
            let oracle = kappa * svd(&a).unwrap().s[0];
            assert!((p.value - oracle).abs() <= 1e-5 * oracle.max(1.0));

            let fd = finite_diff_penalty(&w, |x| srip_penalty(x, kappa, 5000).value);
            let err = p.grad.sub(&fd).frobenius_norm() / p.grad.frobenius_norm().max(1.0);
            assert!(err <= 1e-3, "seed {seed}: rel err {err:e}");
        }
    }
}
