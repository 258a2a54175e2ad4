//! Small dense linear algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Smallest admissible |eigenvalue| when inverting a symmetric matrix.
pub const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Error, PartialEq)]
#[error("singular inverse: min |eigenvalue| {min_abs_eig:e} below {SINGULAR_TOL:e}")]
pub struct SingularInverse {
    pub min_abs_eig: f64,
}

pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).abs().max()
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let e = SymmetricEigen::new(sym(m));
    let mut v: Vec<f64> = e.eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    sym_eigenvalues(m)[0]
}

/// Inverse of a symmetric (possibly indefinite) matrix via eigendecomposition.
pub fn inv_sym(m: &DMatrix<f64>) -> Result<DMatrix<f64>, SingularInverse> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        if !(v.abs() >= SINGULAR_TOL) {
            return Err(SingularInverse { min_abs_eig: v.abs() });
        }
        return Ok(DMatrix::from_element(1, 1, 1.0 / v));
    }
    let e = SymmetricEigen::new(sym(m));
    let min_abs = e.eigenvalues.iter().fold(f64::INFINITY, |a, &x| a.min(x.abs()));
    if !(min_abs >= SINGULAR_TOL) {
        return Err(SingularInverse { min_abs_eig: min_abs });
    }
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|x| 1.0 / x));
    Ok(sym(&(&e.eigenvectors * d * e.eigenvectors.transpose())))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn ones(r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_element(r, c, 1.0)
}

/// Column vector as an n×1 matrix.
pub fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

pub fn to_vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Maximum absolute entry; zero for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, &x| a.max(x.abs()))
}

pub fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}
