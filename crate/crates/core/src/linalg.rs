//! Thin bridge between `ndarray` storage and `nalgebra` decompositions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

pub(crate) fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending order.
pub(crate) fn sym_eig_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in idx.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `(M Mᵀ)^(-1/2) M` for a square matrix, the symmetric decorrelation step.
pub(crate) fn sym_decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eig_desc(&(w * w.transpose()));
    let inv_sqrt = DMatrix::from_diagonal(&values.map(|v| 1.0 / v.max(1e-300).sqrt()));
    &vectors * inv_sqrt * vectors.transpose() * w
}
