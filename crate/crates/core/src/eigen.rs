//! Dense symmetric eigendecomposition for small matrices.
//!
//! All eigenproblems in this crate are over symmetric matrices of order
//! m <= a few dozen (one row per sampled generation), so a cyclic Jacobi
//! iteration is exact enough and keeps the crate free of LAPACK bindings.
//!
//! Determinism contract: eigenvalues are returned ascending; ties keep the
//! pre-sort column order produced by the sweep (for a diagonal input that is
//! index order). Each eigenvector's sign is fixed by making its
//! largest-magnitude entry positive, ties resolved by lowest index.

use ndarray::Array2;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 128;

/// Eigenvalues (ascending) and matching eigenvectors (columns) of a symmetric
/// matrix. Fails on non-square or non-finite input, or if the sweep does not
/// converge.
pub fn jacobi_eigh(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "eigh expects a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("eigh input contains non-finite entries".into()));
    }
    let asym = a
        .iter()
        .zip(a.t().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    let scale = a.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1.0);
    if asym > 1e-9 * scale {
        return Err(Error::InvalidInput(format!(
            "eigh expects a symmetric matrix (max asymmetry {asym:.3e})"
        )));
    }

    if n == 0 {
        return Ok((Vec::new(), Array2::zeros((0, 0))));
    }

    let mut m = a.clone();
    // Force exact symmetry so rotations stay consistent.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    let mut v: Array2<f64> = Array2::eye(n);
    let tol = 1e-14 * scale;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi sweep did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigvals: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    order.sort_by(|&i, &j| eigvals[i].partial_cmp(&eigvals[j]).unwrap());

    let mut values = Vec::with_capacity(n);
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        values.push(eigvals[src]);
        let mut best = 0usize;
        for k in 1..n {
            if v[[k, src]].abs() > v[[best, src]].abs() {
                best = k;
            }
        }
        let flip = if v[[best, src]] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[[k, dst]] = flip * v[[k, src]];
        }
    }
    Ok((values, vectors))
}

/// exp(-t * A) for symmetric A, via the eigendecomposition.
pub fn sym_matrix_exp_neg(a: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    let n = a.nrows();
    let (vals, vecs) = jacobi_eigh(a)?;
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vecs[[i, k]] * (-t * vals[k]).exp() * vecs[[j, k]];
            }
            out[[i, j]] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    /// Closed-form eigenvalues of a symmetric 2x2 matrix.
    fn eig2(a: f64, b: f64, d: f64) -> (f64, f64) {
        let tr = a + d;
        let det = a * d - b * b;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        (tr / 2.0 - disc, tr / 2.0 + disc)
    }

    #[test]
    fn matches_closed_form_2x2() {
        let m = arr2(&[[2.0, 1.0], [1.0, 3.0]]);
        let (vals, vecs) = jacobi_eigh(&m).unwrap();
        let (lo, hi) = eig2(2.0, 1.0, 3.0);
        assert!((vals[0] - lo).abs() < 1e-12);
        assert!((vals[1] - hi).abs() < 1e-12);
        // Residual check: M v = lambda v.
        for k in 0..2 {
            for i in 0..2 {
                let mv = (0..2).map(|j| m[[i, j]] * vecs[[j, k]]).sum::<f64>();
                assert!((mv - vals[k] * vecs[[i, k]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_matrix_yields_identity_basis_in_index_order() {
        let m = Array2::zeros((3, 3));
        let (vals, vecs) = jacobi_eigh(&m).unwrap();
        assert_eq!(vals, vec![0.0, 0.0, 0.0]);
        assert_eq!(vecs, Array2::<f64>::eye(3));
    }

    #[test]
    fn sign_convention_makes_dominant_entry_positive() {
        let m = arr2(&[[1.0, 0.0], [0.0, 2.0]]);
        let (_, vecs) = jacobi_eigh(&m).unwrap();
        assert!(vecs[[0, 0]] > 0.0);
        assert!(vecs[[1, 1]] > 0.0);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = arr2(&[[0.0, 1.0], [0.0, 0.0]]);
        assert!(jacobi_eigh(&m).is_err());
    }

    #[test]
    fn matrix_exp_of_zero_is_identity() {
        let m = Array2::zeros((4, 4));
        let e = sym_matrix_exp_neg(&m, 0.7).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((e[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    fn sym_strategy(n: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n * n).prop_map(move |flat| {
            let mut m = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let v = flat[i * n + j];
                    m[[i, j]] += v / 2.0;
                    m[[j, i]] += v / 2.0;
                }
            }
            m
        })
    }

    proptest! {
        #[test]
        fn reconstructs_input_and_keeps_orthonormal_basis(m in sym_strategy(4)) {
            let (vals, vecs) = jacobi_eigh(&m).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let mut recon = 0.0;
                    let mut dot = 0.0;
                    for k in 0..4 {
                        recon += vecs[[i, k]] * vals[k] * vecs[[j, k]];
                        dot += vecs[[k, i]] * vecs[[k, j]];
                    }
                    prop_assert!((recon - m[[i, j]]).abs() < 1e-8);
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - want).abs() < 1e-9);
                }
            }
            for w in vals.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-12);
            }
        }
    }
}
