//! Power iteration for the largest singular value.

use super::DenseMatrix;
use crate::scalar::Scalar;

/// Result of a power iteration run.
#[derive(Debug, Clone)]
pub struct PowerIteration<S> {
    /// Estimate of the largest singular value.
    pub sigma: S,
    /// Converged right singular vector estimate (unit norm), length `cols`.
    pub vector: Vec<S>,
    /// Whether the relative change dropped below tolerance before `max_iter`.
    pub converged: bool,
    /// Iterations actually performed.
    pub iterations: usize,
}

/// Estimates the largest singular value of `a` by iterating
/// `v <- normalize(A^T (A v))`.
///
/// The start vector is a fixed deterministic unit vector (a seeded
/// pseudo-random direction derived from the matrix dimensions), so repeated
/// runs reproduce exactly. A zero matrix yields `sigma = 0`, converged.
pub fn power_iteration_sigma_max<S: Scalar>(
    a: &DenseMatrix<S>,
    tol: S,
    max_iter: usize,
) -> PowerIteration<S> {
    let n = a.cols();
    let mut v = seeded_unit_vector::<S>(n, a.rows() as u64);

    if a.frobenius_norm() == S::zero() || n == 0 || a.rows() == 0 {
        return PowerIteration {
            sigma: S::zero(),
            vector: v,
            converged: true,
            iterations: 0,
        };
    }

    let mut sigma = S::zero();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let av = a.matvec(&v);
        let atav = a.matvec_t(&av);
        let norm = atav
            .iter()
            .map(|x| *x * *x)
            .fold(S::zero(), |acc, x| acc + x)
            .sqrt();
        if norm == S::zero() {
            // v landed exactly in the null space; nudge deterministically.
            v = seeded_unit_vector::<S>(n, a.rows() as u64 ^ (it as u64) << 32);
            continue;
        }
        let inv = S::one() / norm;
        for (vi, x) in v.iter_mut().zip(&atav) {
            *vi = *x * inv;
        }
        let av = a.matvec(&v);
        let new_sigma = av
            .iter()
            .map(|x| *x * *x)
            .fold(S::zero(), |acc, x| acc + x)
            .sqrt();
        let delta = (new_sigma - sigma).abs();
        sigma = new_sigma;
        if delta <= tol * new_sigma.max(S::epsilon()) {
            converged = true;
            break;
        }
    }

    PowerIteration {
        sigma,
        vector: v,
        converged,
        iterations,
    }
}

/// Deterministic pseudo-random unit vector of length `n` (splitmix-style
/// generator seeded from `n` and `salt`).
fn seeded_unit_vector<S: Scalar>(n: usize, salt: u64) -> Vec<S> {
    if n == 0 {
        return Vec::new();
    }
    let mut state = (n as u64)
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(salt | 1);
    let mut v: Vec<S> = (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^= z >> 31;
            S::from_f64_const((z >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        })
        .collect();
    let norm = v
        .iter()
        .map(|x| *x * *x)
        .fold(S::zero(), |acc, x| acc + x)
        .sqrt();
    let inv = S::one() / norm;
    for x in &mut v {
        *x = *x * inv;
    }
    v
}
