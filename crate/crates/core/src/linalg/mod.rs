//! Self-contained dense linear algebra used by every compression method.

mod eig;
mod lasso;
mod matrix;
mod solve;
mod svd;

pub use eig::{eig_sym, SymEigen};
pub use lasso::{lasso_cd, lasso_cd_traced, soft_threshold};
pub use matrix::Matrix;
pub use solve::{cholesky, cholesky_solve, default_ridge, reduced_rank_regression, ridge_solve, RrrResult};
pub use svd::{svd, SvdResult};

pub(crate) use svd::complete_basis;

/// Top-`r` left singular vectors of `a`. When `r` exceeds the number
/// available the block is completed to an orthonormal set.
pub(crate) fn leading_left_vectors(a: &Matrix, r: usize) -> crate::Result<Matrix> {
    let dec = svd(a)?;
    let avail = dec.s.len().min(r);
    let mut cols: Vec<Vec<f64>> = (0..avail).map(|k| dec.u.col(k)).collect();
    let missing: Vec<usize> = (avail..r).collect();
    cols.extend(missing.iter().map(|_| vec![0.0; a.rows()]));
    complete_basis(&mut cols, &missing);
    Ok(Matrix::from_fn(a.rows(), r, |i, k| cols[k][i]))
}
