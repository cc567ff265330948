//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn prepend_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::from_element(n, x.ncols() + 1, 1.0);
    out.view_mut((0, 1), (n, x.ncols())).copy_from(x);
    out
}

/// Numerical column rank from the singular values, relative tolerance 1e-10.
pub fn column_rank(x: &DMatrix<f64>) -> usize {
    if x.ncols() == 0 || x.nrows() == 0 {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * max).count()
}

/// Orthonormal basis of the column space of a full-column-rank `x`.
/// Returns `None` when `x` is numerically rank deficient.
pub fn orthonormal_basis(x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let p = x.ncols();
    if p == 0 {
        return Some(DMatrix::zeros(x.nrows(), 0));
    }
    if x.nrows() < p {
        return None;
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if scale == 0.0 || (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * scale) {
        return None;
    }
    Some(qr.q())
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (eigenvectors permuted to match).
pub fn sorted_symmetric_eigen(a: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let SymmetricEigen {
        eigenvalues,
        eigenvectors,
    } = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]).then(i.cmp(&j)));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Least-squares coefficients of `y` on the columns of `x` (full column rank).
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    if x.ncols() == 0 {
        return Some(DVector::zeros(0));
    }
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r().solve_upper_triangular(&qty)
}

/// Symmetrize in place: `(A + A^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}
