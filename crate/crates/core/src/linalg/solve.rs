use super::eig::eig_sym;
use super::matrix::Matrix;
use super::svd::svd;
use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a metric is treated as singular.
const PINV_RTOL: f64 = 1e-12;

/// Default ridge for normal equations built from `z` (features in rows):
/// `1e-8 · trace(Z Zᵀ) / rows(Z)`.
pub fn default_ridge(z: &Matrix) -> f64 {
    if z.rows() == 0 {
        return 0.0;
    }
    let tr: f64 = z.as_slice().iter().map(|x| x * x).sum();
    1e-8 * tr / z.rows() as f64
}

/// Lower-triangular Cholesky factor of an SPD matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape("cholesky needs a square matrix".into()));
    }
    let scale = (0..n).fold(0.0f64, |m, i| m.max(a[(i, i)].abs()));
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 1e-14 * scale) {
            return Err(Error::Singular("matrix is not positive definite"));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `A X = B` given the Cholesky factor `L` of `A`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// `M = Y Zᵀ (Z Zᵀ + εI)⁻¹`, the minimizer of `‖Y − MZ‖²_F + ε‖M‖²_F`.
///
/// Samples are columns: `Y` is `t × n`, `Z` is `m × n`, `M` is `t × m`.
pub fn ridge_solve(y: &Matrix, z: &Matrix, eps: f64) -> Result<Matrix> {
    if y.cols() != z.cols() {
        return Err(Error::Shape(format!(
            "ridge_solve: Y has {} samples, Z has {}",
            y.cols(),
            z.cols()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge eps must be >= 0, got {eps}")));
    }
    let mut c = z.matmul_t(z);
    for i in 0..c.rows() {
        c[(i, i)] += eps;
    }
    let l = cholesky(&c)?;
    let zy = z.matmul_t(y);
    Ok(cholesky_solve(&l, &zy).transpose())
}

/// Rank-constrained least squares solution.
#[derive(Clone, Debug)]
pub struct RrrResult {
    /// `t × m` coefficient matrix, `M = left · right`.
    pub m: Matrix,
    /// `t × r`
    pub left: Matrix,
    /// `r × m`
    pub right: Matrix,
    pub rank: usize,
    /// `‖Y − MZ‖_F`
    pub residual: f64,
}

/// Reduced-rank regression `argmin_{rank M ≤ r} ‖Y − MZ‖²_F + ε‖M‖²_F`.
///
/// Whitening route: with `C = ZZᵀ + εI`, the optimum is the rank-`r`
/// truncated SVD of `Y Zᵀ C^{-1/2}` mapped back through `C^{-1/2}`. This is
/// the generalized-SVD solution whenever the metric `C` is nonsingular;
/// otherwise `C^{-1/2}` is taken on the range of `C`.
pub fn reduced_rank_regression(y: &Matrix, z: &Matrix, r: usize, eps: f64) -> Result<RrrResult> {
    let t = y.rows();
    if r == 0 || r > t {
        return Err(Error::RankOutOfRange {
            what: "reduced-rank regression",
            rank: r,
            max: t,
        });
    }
    if y.cols() != z.cols() {
        return Err(Error::Shape(format!(
            "reduced_rank_regression: Y has {} samples, Z has {}",
            y.cols(),
            z.cols()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge eps must be >= 0, got {eps}")));
    }
    let m_dim = z.rows();
    let mut c = z.matmul_t(z);
    for i in 0..m_dim {
        c[(i, i)] += eps;
    }
    let eig = eig_sym(&c)?;
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let floor = PINV_RTOL * top;
    let c_inv_sqrt = eig.map_values(|l| if l > floor && l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });

    let whitened = y.matmul_t(z).matmul(&c_inv_sqrt);
    let dec = svd(&whitened)?;
    let avail = dec.s.len();
    let mut left = Matrix::zeros(t, r);
    let mut right_w = Matrix::zeros(r, m_dim);
    for k in 0..r.min(avail) {
        for i in 0..t {
            left[(i, k)] = dec.u[(i, k)] * dec.s[k];
        }
        for j in 0..m_dim {
            right_w[(k, j)] = dec.v[(j, k)];
        }
    }
    let right = right_w.matmul(&c_inv_sqrt);
    let m = left.matmul(&right);
    let residual = y.sub(&m.matmul(z)).frobenius_norm();
    Ok(RrrResult {
        m,
        left,
        right,
        rank: r,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn ridge_identity_cases() {
        let z = sample(3, 10, 1);
        let m = ridge_solve(&z, &z, 0.0).unwrap();
        assert!(m.sub(&Matrix::identity(3)).max_abs() < 1e-10);

        let y = sample(2, 4, 2);
        let m = ridge_solve(&y, &Matrix::identity(4), 0.0).unwrap();
        assert!(m.sub(&y).max_abs() < 1e-12);
    }

    #[test]
    fn ridge_singular_without_eps() {
        let z = Matrix::from_fn(2, 5, |_, j| j as f64); // identical rows
        let y = sample(1, 5, 3);
        assert!(matches!(ridge_solve(&y, &z, 0.0), Err(Error::Singular(_))));
        assert!(ridge_solve(&y, &z, 1e-6).is_ok());
    }

    #[test]
    fn rrr_full_rank_matches_ridge() {
        let y = sample(3, 40, 4);
        let z = sample(4, 40, 5);
        let full = ridge_solve(&y, &z, 1e-12).unwrap();
        let rrr = reduced_rank_regression(&y, &z, 3, 1e-12).unwrap();
        assert!(rrr.m.sub(&full).max_abs() < 1e-8);
    }

    #[test]
    fn rrr_rejects_bad_rank() {
        let y = sample(3, 10, 6);
        assert!(reduced_rank_regression(&y, &y, 0, 0.0).is_err());
        assert!(reduced_rank_regression(&y, &y, 4, 0.0).is_err());
    }

    #[test]
    fn rrr_residual_nonincreasing_in_rank() {
        let y = sample(5, 60, 7);
        let z = sample(6, 60, 8);
        let eps = default_ridge(&z);
        let res: Vec<f64> = (1..=5)
            .map(|r| reduced_rank_regression(&y, &z, r, eps).unwrap().residual)
            .collect();
        assert!(res.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}
