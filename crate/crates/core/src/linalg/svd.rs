//! Thin SVD by one-sided Jacobi rotations.
//!
//! The taller orientation of the input is orthogonalized column by column;
//! singular values are the final column norms. Deterministic: no random
//! starts, fixed sweep order, and a fixed sign convention (largest-magnitude
//! entry of every left singular vector is nonnegative).

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const ORTHO_TOL: f64 = 1e-15;

/// `A = U · diag(S) · Vᵀ` with `p = min(m, n)` columns in `U` and `V`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank_cap(&self) -> usize {
        self.s.len()
    }

    /// `U_r · diag(S_r) · V_rᵀ`.
    pub fn reconstruct_rank(&self, r: usize) -> Matrix {
        let r = r.min(self.s.len());
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for k in 0..r {
            let sk = self.s[k];
            if sk == 0.0 {
                continue;
            }
            for i in 0..m {
                let a = self.u[(i, k)] * sk;
                if a == 0.0 {
                    continue;
                }
                for (o, j) in out.row_mut(i).iter_mut().zip(0..n) {
                    *o += a * self.v[(j, k)];
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.s.len())
    }

    /// Squared Frobenius error of the rank-`r` truncation: `Σ_{i>r} S_i²`.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.s.iter().skip(r).map(|x| x * x).sum()
    }
}

/// Computes the thin SVD of `a`.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let (m, n) = a.shape();
    let transpose = m < n;
    let (wm, wn) = if transpose { (n, m) } else { (m, n) };

    // Column-major working copy of the tall orientation.
    let mut cols: Vec<Vec<f64>> = (0..wn)
        .map(|j| {
            (0..wm)
                .map(|i| if transpose { a[(j, i)] } else { a[(i, j)] })
                .collect()
        })
        .collect();
    let mut v: Vec<Vec<f64>> = (0..wn)
        .map(|j| {
            let mut e = vec![0.0; wn];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..wn {
            for q in (p + 1)..wn {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..wn).collect();
    // Stable sort keeps lower index first on ties.
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(wn);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if norms[j] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; wm]);
            missing.push(k);
        }
    }
    complete_basis(&mut u_cols, &missing);
    let v_cols: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();

    let (mut u_cols, mut v_cols) = if transpose {
        (v_cols, u_cols)
    } else {
        (u_cols, v_cols)
    };
    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        if largest_entry_negative(uc) {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let p = wn;
    let u = Matrix::from_fn(m, p, |i, k| u_cols[k][i]);
    let v = Matrix::from_fn(n, p, |i, k| v_cols[k][i]);
    Ok(SvdResult { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed (zero) columns with unit vectors orthogonal to all others.
pub(crate) fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0;
    for &k in missing {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against every filled column.
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (missing.contains(&j) && dot(c, c) == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let nrm = dot(&e, &e).sqrt();
            if nrm > 1e-8 {
                cols[k] = e.iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

pub(crate) fn largest_entry_negative(v: &[f64]) -> bool {
    let mut best = 0.0f64;
    let mut neg = false;
    for &x in v {
        if x.abs() > best {
            best = x.abs();
            neg = x < 0.0;
        }
    }
    neg
}
