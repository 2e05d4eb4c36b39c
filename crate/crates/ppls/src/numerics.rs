//! Dense linear-algebra kernels used by the rest of the crate.
//!
//! Everything here is pure and deterministic: repeated calls on identical
//! input produce bit-identical output. Matrices are `ndarray::Array2<f64>`
//! in standard (row-major) layout.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{PplsError, Result};

/// Dense real matrix, row-major.
pub type Matrix = Array2<f64>;

/// Orthonormality tolerance guaranteed by [`gram_schmidt_orthonormalize`].
pub const ORTHO_TOL: f64 = 1e-12;
/// A projected column with norm at or below this is treated as linearly dependent.
pub const DEGENERATE_COLUMN_TOL: f64 = 1e-12;
/// Cholesky pivot threshold, relative to the largest diagonal entry.
pub const CHOLESKY_PIVOT_REL_TOL: f64 = 1e-12;
/// Singular values below this fraction of the largest are treated as zero.
pub const SINGULAR_VALUE_REL_TOL: f64 = 1e-10;

/// Modified Gram-Schmidt with one reorthogonalization pass.
///
/// The first column of the result is the first column of `a` normalized;
/// later columns are projected against all previous ones twice before
/// normalization, which keeps `Q^T Q = I` to about 1e-12 for inputs with
/// condition number below 1e6.
pub fn gram_schmidt_orthonormalize(a: &Matrix) -> Result<Matrix> {
    let (n, k) = a.dim();
    assert!(k <= n, "need at least as many rows as columns");
    let mut q = a.clone();
    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let qi = q.column(i).to_owned();
                let proj = qi.dot(&q.column(j));
                let mut col = q.column_mut(j);
                col.scaled_add(-proj, &qi);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        if norm <= DEGENERATE_COLUMN_TOL {
            return Err(PplsError::DegenerateColumns { index: j, norm });
        }
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    Ok(q)
}

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// Only the lower triangle of `m` is read. Fails with
/// [`PplsError::NotPositiveDefinite`] when a pivot drops to
/// `CHOLESKY_PIVOT_REL_TOL` times the largest diagonal entry.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: Vec<f64>,
    n: usize,
}

impl SpdFactor {
    pub fn new(m: &Matrix) -> Result<Self> {
        let n = m.nrows();
        assert_eq!(n, m.ncols(), "matrix must be square");
        let mut max_diag = 0.0f64;
        for i in 0..n {
            max_diag = max_diag.max(m[[i, i]].abs());
        }
        let pivot_tol = CHOLESKY_PIVOT_REL_TOL * max_diag.max(f64::MIN_POSITIVE);
        let mut l = vec![0.0f64; n * n];
        for j in 0..n {
            let mut sum = m[[j, j]];
            for k in 0..j {
                sum -= l[j * n + k] * l[j * n + k];
            }
            if sum <= pivot_tol {
                return Err(PplsError::NotPositiveDefinite {
                    index: j,
                    pivot: sum,
                });
            }
            let ljj = sum.sqrt();
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut s = m[[i, j]];
                let (head, tail) = l.split_at(i * n);
                let row_j = &head[j * n..j * n + j];
                let row_i = &tail[..j];
                for k in 0..j {
                    s -= row_i[k] * row_j[k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Ok(Self { l, n })
    }

    pub fn lower(&self) -> Matrix {
        Array2::from_shape_vec((self.n, self.n), self.l.clone()).expect("shape")
    }

    /// ln|M| from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            s += self.l[i * self.n + i].ln();
        }
        2.0 * s
    }

    /// Solve `M X = B` for every column of `B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.n;
        assert_eq!(b.nrows(), n, "right-hand side row count");
        let k = b.ncols();
        let mut x = b.clone();
        // forward: L y = b
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            for c in 0..k {
                let mut s = x[[i, c]];
                for (j, lij) in row.iter().enumerate() {
                    s -= lij * x[[j, c]];
                }
                x[[i, c]] = s / self.l[i * n + i];
            }
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            for c in 0..k {
                let mut s = x[[i, c]];
                for j in (i + 1)..n {
                    s -= self.l[j * n + i] * x[[j, c]];
                }
                x[[i, c]] = s / self.l[i * n + i];
            }
        }
        x
    }

    /// tr(M^{-1} A) without forming the inverse.
    pub fn trace_solve(&self, a: &Matrix) -> f64 {
        let x = self.solve(a);
        x.diag().sum()
    }

    /// M^{-1}, for small matrices where the explicit inverse is wanted.
    pub fn inverse(&self) -> Matrix {
        self.solve(&Array2::eye(self.n))
    }
}

/// Lower-triangular Cholesky factor `L` with `L L^T = M`.
pub fn cholesky_lower(m: &Matrix) -> Result<Matrix> {
    Ok(SpdFactor::new(m)?.lower())
}

/// Solve `M X = B` for symmetric positive-definite `M`.
pub fn solve_spd(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(SpdFactor::new(m)?.solve(b))
}

/// Solve `L X = B` for lower-triangular `L`.
pub fn solve_lower_triangular(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.nrows();
    assert_eq!(b.nrows(), n);
    let k = b.ncols();
    let mut x = b.clone();
    for i in 0..n {
        for c in 0..k {
            let mut s = x[[i, c]];
            for j in 0..i {
                s -= l[[i, j]] * x[[j, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as columns. Each eigenvector is signed so its entry of
/// largest absolute value is positive (ties broken by lowest index), which
/// makes the output deterministic.
pub fn sym_eig(m: &Matrix) -> (Array1<f64>, Matrix) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix must be square");
    let mut a: Matrix = 0.5 * (m + &m.t());
    let mut v: Matrix = Array2::eye(n);
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = (1e-15 * frob.max(f64::MIN_POSITIVE)).powi(2);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                a[[p, p]] = app - t * apq;
                a[[q, q]] = aqq + t * apq;
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a[[i, p]];
                        let aiq = a[[i, q]];
                        a[[i, p]] = c * aip - s * aiq;
                        a[[p, i]] = a[[i, p]];
                        a[[i, q]] = s * aip + c * aiq;
                        a[[q, i]] = a[[i, q]];
                    }
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).expect("finite eigenvalues"));
    let mut eigvals = Array1::zeros(n);
    let mut eigvecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        eigvals[dst] = a[[src, src]];
        let col = v.index_axis(Axis(1), src);
        let mut best = 0usize;
        for i in 1..n {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            eigvecs[[i, dst]] = sign * col[i];
        }
    }
    (eigvals, eigvecs)
}

/// Symmetric pseudo-inverse: eigenvalues below `rel_tol` times the largest
/// magnitude are dropped.
pub fn sym_pseudo_inverse(m: &Matrix, rel_tol: f64) -> Matrix {
    let (vals, vecs) = sym_eig(m);
    let scale = vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let n = m.nrows();
    let mut out = Array2::zeros((n, n));
    for k in 0..n {
        if vals[k].abs() > rel_tol * scale {
            let col = vecs.index_axis(Axis(1), k);
            let w = 1.0 / vals[k];
            for i in 0..n {
                for j in 0..n {
                    out[[i, j]] += w * col[i] * col[j];
                }
            }
        }
    }
    out
}

/// Top-`r` singular triplets of a rectangular matrix, computed from the
/// eigendecomposition of the smaller Gram matrix.
///
/// Columns of `u` and `v` are jointly signed so the largest-magnitude entry
/// of each `u` column is positive. Fails with [`PplsError::RankDeficient`]
/// when fewer than `r` singular values exceed `SINGULAR_VALUE_REL_TOL`
/// times the largest.
pub fn top_singular_triplets(m: &ArrayView2<f64>, r: usize) -> Result<(Matrix, Array1<f64>, Matrix)> {
    let (p, q) = m.dim();
    assert!(r >= 1, "need at least one triplet");
    if r > p.min(q) {
        return Err(PplsError::RankDeficient {
            found: p.min(q),
            needed: r,
        });
    }
    let (mut u, s, mut v) = if q <= p {
        let gram = m.t().dot(m);
        let (vals, vecs) = sym_eig(&gram);
        let s: Array1<f64> = vals.slice(ndarray::s![..r]).mapv(|x| x.max(0.0).sqrt());
        check_rank(&vals.mapv(|x| x.max(0.0)), r)?;
        let v = vecs.slice(ndarray::s![.., ..r]).to_owned();
        let mut u = m.dot(&v);
        for k in 0..r {
            u.column_mut(k).mapv_inplace(|x| x / s[k]);
        }
        (u, s, v)
    } else {
        let gram = m.dot(&m.t());
        let (vals, vecs) = sym_eig(&gram);
        let s: Array1<f64> = vals.slice(ndarray::s![..r]).mapv(|x| x.max(0.0).sqrt());
        check_rank(&vals.mapv(|x| x.max(0.0)), r)?;
        let u = vecs.slice(ndarray::s![.., ..r]).to_owned();
        let mut v = m.t().dot(&u);
        for k in 0..r {
            v.column_mut(k).mapv_inplace(|x| x / s[k]);
        }
        (u, s, v)
    };
    // joint sign convention keyed on u
    for k in 0..r {
        let col = u.column(k);
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u.column_mut(k).mapv_inplace(|x| -x);
            v.column_mut(k).mapv_inplace(|x| -x);
        }
    }
    Ok((u, s, v))
}

/// Rank test on the Gram eigenvalue scale: squaring the singular values
/// keeps numerical-noise eigenvalues (~machine epsilon relative) safely
/// below the threshold.
fn check_rank(gram_eigenvalues: &Array1<f64>, r: usize) -> Result<()> {
    let max = gram_eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let found = gram_eigenvalues
        .iter()
        .filter(|&&lambda| lambda > SINGULAR_VALUE_REL_TOL * max)
        .count();
    if max == 0.0 || found < r {
        Err(PplsError::RankDeficient { found, needed: r })
    } else {
        Ok(())
    }
}
