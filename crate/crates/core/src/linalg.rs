//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// `c ← alpha·op(a)·op(b) + beta·c` where `op` optionally transposes.
/// Transposes are expressed through strides, so nothing is copied.
#[allow(clippy::too_many_arguments)]
pub fn gemm(alpha: f64, a: &DMatrix<f64>, ta: bool, b: &DMatrix<f64>, tb: bool, beta: f64, c: &mut DMatrix<f64>) {
    let view = |m: &DMatrix<f64>, t: bool| {
        let (r, k) = m.shape();
        if t {
            (k, r, r as isize, 1isize)
        } else {
            (r, k, 1isize, r as isize)
        }
    };
    let (m, k, rsa, csa) = view(a, ta);
    let (k2, n, rsb, csb) = view(b, tb);
    assert_eq!(k, k2, "gemm: inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "gemm: output shape");
    if m == 0 || n == 0 {
        return;
    }
    let rsc = 1isize;
    let csc = m as isize;
    // SAFETY: the strides describe the column-major storage of each matrix and the
    // shapes were checked above, so every index stays inside its allocation.
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
/// The input is symmetrized first so tiny asymmetries from accumulation do not matter.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let s = symmetrized(m);
    let eig = s.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Principal square root of a PSD matrix; negative rounding eigenvalues are clipped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let mut scaled = vecs.clone();
    for (j, v) in vals.iter().enumerate() {
        let r = v.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(r);
    }
    &scaled * vecs.transpose()
}

/// Solve `(K + ridge I) x = y` by Cholesky, adding `1e-12 λ_max` jitter once if
/// the factorization fails. Returns `None` when both attempts fail.
pub fn cholesky_solve(k: &DMatrix<f64>, ridge: f64, y: &DVector<f64>) -> Option<DVector<f64>> {
    let n = k.nrows();
    let mut a = symmetrized(k);
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(y));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for i in 0..n {
        a[(i, i)] += 1e-12 * scale;
    }
    a.cholesky().map(|ch| ch.solve(y))
}

/// Pseudo-inverse solve, dropping eigenmodes below `rel_tol · λ_max`.
/// Returns the solution and the number of retained modes.
pub fn pinv_solve(k: &DMatrix<f64>, y: &DVector<f64>, rel_tol: f64) -> (DVector<f64>, usize) {
    let (vals, vecs) = sym_eigen_desc(k);
    let lmax = vals.first().copied().unwrap_or(0.0);
    let mut x = DVector::zeros(k.nrows());
    let mut rank = 0;
    if lmax <= 0.0 {
        return (x, 0);
    }
    for (j, &v) in vals.iter().enumerate() {
        if v > rel_tol * lmax {
            let u = vecs.column(j);
            let c = u.dot(y) / v;
            x.axpy(c, &u, 1.0);
            rank += 1;
        }
    }
    (x, rank)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn top_eigenvalue(k: &DMatrix<f64>, max_iter: usize) -> f64 {
    let n = k.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lam = 0.0;
    for _ in 0..max_iter {
        let w = k * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lam).abs() <= 1e-12 * next.abs() {
            return next;
        }
        lam = next;
    }
    lam
}

/// Ordinary least squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
