//! Dense linear algebra for the small/medium matrices used by the model.
//!
//! Everything here is plain `f64` on row-major [`ndarray`] storage. Sizes
//! stay in the low hundreds (inducing counts, planner batch sizes), so
//! unblocked factorizations with row-axpy inner loops are fast enough and
//! keep the numerics easy to audit.

use ndarray::{Array2, ArrayView2, Axis};
use std::collections::HashMap;

/// Unblocked lower Cholesky with a relative pivot floor.
///
/// Returns `None` when a pivot falls below `n * eps * max_diag`, which makes
/// factorization of near-singular matrices fail predictably instead of
/// depending on rounding luck; callers recover by escalating jitter.
pub fn cholesky(a: &ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0_f64, f64::max);
    let tol = (n.max(1) as f64) * f64::EPSILON * max_diag.max(f64::MIN_POSITIVE);

    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !sum.is_finite() || sum < tol {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solves `L X = B` for lower-triangular `L` (forward substitution).
pub fn solve_lower(l: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    assert_eq!(n, b.nrows(), "solve_lower shape mismatch");
    let mut x = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let c = l[[i, k]];
            if c != 0.0 {
                let (head, mut tail) = x.view_mut().split_at(Axis(0), i);
                tail.row_mut(0).scaled_add(-c, &head.row(k));
            }
        }
        let d = l[[i, i]];
        x.row_mut(i).mapv_inplace(|v| v / d);
    }
    x
}

/// Solves `L^T X = B` for lower-triangular `L` (backward substitution).
pub fn solve_lower_transpose(l: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    assert_eq!(n, b.nrows(), "solve_lower_transpose shape mismatch");
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let c = l[[k, i]];
            if c != 0.0 {
                let (mut head, tail) = x.view_mut().split_at(Axis(0), k);
                head.row_mut(i).scaled_add(-c, &tail.row(0));
            }
        }
        let d = l[[i, i]];
        x.row_mut(i).mapv_inplace(|v| v / d);
    }
    x
}

/// Solves `(L L^T) X = B` given the lower Cholesky factor `L`.
pub fn solve_psd(l: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, &y.view())
}

/// Explicit `(L L^T)^{-1}` from the Cholesky factor.
pub fn inv_from_cholesky(l: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let eye = Array2::<f64>::eye(n);
    solve_psd(l, &eye.view())
}

/// `2 * sum(log diag L)`, the log-determinant of `L L^T`.
pub fn logdet_from_cholesky(l: &ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// Reverse-mode adjoint of the Cholesky factorization.
///
/// Given `Sigma = L L^T` and the adjoint `lbar` of the lower factor, returns
/// the symmetric adjoint of `Sigma`. Entries of `lbar` above the diagonal
/// are ignored.
pub fn cholesky_backward(l: &ArrayView2<f64>, lbar: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    // P = phi(L^T Lbar): lower triangle with halved diagonal.
    let mut p = l.t().dot(&tril(lbar));
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p[[i, j]] = 0.0;
            } else if j == i {
                p[[i, j]] *= 0.5;
            }
        }
    }
    // S = L^{-T} P L^{-1}, computed as two triangular solves.
    let a = solve_lower_transpose(l, &p.view());
    let b = solve_lower_transpose(l, &a.t().to_owned().view());
    let s = b.t().to_owned();
    symmetrize(&s.view())
}

/// Lower-triangular copy (diagonal kept).
pub fn tril(a: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for ((i, j), v) in out.indexed_iter_mut() {
        if j > i {
            *v = 0.0;
        }
    }
    out
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            out[[i, j]] = m;
            out[[j, i]] = m;
        }
    }
    out
}

/// Collapses bitwise-identical rows.
///
/// Returns the unique rows in first-occurrence order together with the map
/// from original row index to unique row index. Joint sampling over the
/// unique set plus scatter-back guarantees duplicate inputs get identical
/// outputs.
pub fn dedup_rows(x: &ArrayView2<f64>) -> (Array2<f64>, Vec<usize>) {
    let n = x.nrows();
    let d = x.ncols();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(n);
    let mut unique_rows: Vec<usize> = Vec::new();
    let mut scatter = Vec::with_capacity(n);
    for i in 0..n {
        let key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
        let next = unique_rows.len();
        let id = *index.entry(key).or_insert_with(|| {
            unique_rows.push(i);
            next
        });
        scatter.push(id);
    }
    let mut unique = Array2::<f64>::zeros((unique_rows.len(), d));
    for (u, &orig) in unique_rows.iter().enumerate() {
        unique.row_mut(u).assign(&x.row(orig));
    }
    (unique, scatter)
}

/// Largest absolute entry.
pub fn max_abs(a: &ArrayView2<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn spd_3x3() -> Array2<f64> {
        array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd_3x3();
        let l = cholesky(&a.view()).unwrap();
        let r = l.dot(&l.t());
        for (x, y) in a.iter().zip(r.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a.view()).is_none());
    }

    #[test]
    fn solves_match_direct_multiplication() {
        let a = spd_3x3();
        let l = cholesky(&a.view()).unwrap();
        let b = array![[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]];
        let x = solve_psd(&l.view(), &b.view());
        let back = a.dot(&x);
        for (p, q) in back.iter().zip(b.iter()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-10);
        }
        let inv = inv_from_cholesky(&l.view());
        let eye = a.dot(&inv);
        for (i, row) in eye.outer_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(*v, want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn logdet_matches_2x2_closed_form() {
        let a = array![[2.0, 0.3], [0.3, 1.5]];
        let l = cholesky(&a.view()).unwrap();
        let det: f64 = 2.0 * 1.5 - 0.3 * 0.3;
        assert_abs_diff_eq!(logdet_from_cholesky(&l.view()), det.ln(), epsilon = 1e-12);
    }

    /// Finite-difference check of the Cholesky adjoint on a random SPD
    /// matrix: contract dSigma against a fixed Lbar and compare.
    #[test]
    fn cholesky_backward_matches_finite_differences() {
        let a = spd_3x3();
        let l = cholesky(&a.view()).unwrap();
        let lbar = array![[0.3, 0.0, 0.0], [-0.2, 0.8, 0.0], [0.1, 0.4, -0.5]];
        let sbar = cholesky_backward(&l.view(), &lbar.view());

        let h = 1e-6;
        for i in 0..3 {
            for j in 0..=i {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[[i, j]] += h;
                ap[[j, i]] = ap[[i, j]];
                am[[i, j]] -= h;
                am[[j, i]] = am[[i, j]];
                let lp = cholesky(&ap.view()).unwrap();
                let lm = cholesky(&am.view()).unwrap();
                let mut fd = 0.0;
                for r in 0..3 {
                    for c in 0..=r {
                        fd += lbar[[r, c]] * (lp[[r, c]] - lm[[r, c]]) / (2.0 * h);
                    }
                }
                // Symmetric perturbation hits (i,j) and (j,i) together.
                let analytic = if i == j {
                    sbar[[i, j]]
                } else {
                    sbar[[i, j]] + sbar[[j, i]]
                };
                assert_abs_diff_eq!(fd, analytic, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn dedup_rows_collapses_bitwise_duplicates() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [1.0, 2.0], [5.0, 6.0], [3.0, 4.0]];
        let (unique, scatter) = dedup_rows(&x.view());
        assert_eq!(unique.nrows(), 3);
        assert_eq!(scatter, vec![0, 1, 0, 2, 1]);
        for (i, &u) in scatter.iter().enumerate() {
            assert_eq!(x.row(i), unique.row(u));
        }
    }
}

