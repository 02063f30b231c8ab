//! Input-channel pruning: lasso channel selection with a least-squares
//! refit, and a weight-magnitude baseline.
//!
//! Channel features use a channel-major patch layout: column
//! `i·k² + x·k + y` of `X` holds input channel `i` at patch offset `(x, y)`.
//! [`channel_major`] converts from the [`PatchBatch`](crate::data_opt::PatchBatch)
//! layout. Responses `Y` are `n × t` and exclude the layer bias.

use crate::error::{Error, Result};
use crate::linalg::{default_ridge, lasso_cd, ridge_solve, Matrix};
use crate::tensor::Kernel4D;

const LAMBDA_GROWTH_STEPS: usize = 200;
const BISECTION_STEPS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct PruneResult {
    /// Selection indicator after refit: 1 for kept channels, 0 otherwise.
    pub beta: Vec<f64>,
    /// Lasso coefficients at the selected penalty (empty for magnitude pruning).
    pub lasso_beta: Vec<f64>,
    /// Selected penalty (0 for magnitude pruning).
    pub lambda: f64,
    /// Kept input channels, ascending.
    pub kept: Vec<usize>,
    pub refit_kernel: Kernel4D,
    /// `‖Y − Σ_{kept} X_i W_iᵀ‖_F` after the refit; for magnitude pruning,
    /// the Frobenius norm of the dropped weights.
    pub residual: f64,
    /// Same residual with the lasso-scaled, unrefit weights.
    pub residual_before_refit: f64,
}

/// Reorders patch rows from `(x, y, i)` to channel-major `(i, x, y)`.
pub fn channel_major(patches: &Matrix, s: usize, k: usize) -> Result<Matrix> {
    let kk = k * k;
    if patches.cols() != kk * s {
        return Err(Error::Shape(format!("patches have {} columns, expected {}", patches.cols(), kk * s)));
    }
    Ok(Matrix::from_fn(patches.rows(), kk * s, |r, c| {
        let (i, xy) = (c / kk, c % kk);
        patches[(r, xy * s + i)]
    }))
}

/// `X_i W_iᵀ` for one channel: `n × t`.
fn channel_response(x: &Matrix, kernel: &Kernel4D, i: usize, scale: f64) -> Matrix {
    let (t, s, k) = kernel.dims();
    let kk = k * k;
    debug_assert_eq!(x.cols(), s * kk);
    let mut out = Matrix::zeros(x.rows(), t);
    for r in 0..x.rows() {
        let patch = &x.row(r)[i * kk..(i + 1) * kk];
        for o in 0..t {
            let w = &kernel.data()[kernel.index(o, i, 0, 0)..kernel.index(o, i, 0, 0) + kk];
            out[(r, o)] = scale * patch.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn channel_norm(kernel: &Kernel4D, i: usize) -> f64 {
    let (t, _, k) = kernel.dims();
    let kk = k * k;
    (0..t)
        .flat_map(|o| kernel.data()[kernel.index(o, i, 0, 0)..kernel.index(o, i, 0, 0) + kk].iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn nnz(beta: &[f64]) -> usize {
    beta.iter().filter(|b| **b != 0.0).count()
}

/// Lasso channel selection followed by a least-squares refit of the kept
/// channels.
///
/// The penalty starts at `lambda_init` and doubles until at most `s_prime`
/// coefficients survive, then 20 bisection steps move it down to the
/// smallest penalty still meeting the target. If the lasso drops several
/// channels at once, the kept set is topped up to `s_prime` with the
/// largest coefficients from the last penalty that kept too many.
pub fn channel_prune(kernel: &Kernel4D, x: &Matrix, y: &Matrix, s_prime: usize, lambda_init: f64) -> Result<PruneResult> {
    let (t, s, k) = kernel.dims();
    let kk = k * k;
    if s_prime == 0 || s_prime >= s {
        return Err(Error::InvalidArgument(format!(
            "target channel count must satisfy 1 <= s' < s = {s}, got {s_prime}"
        )));
    }
    if x.cols() != s * kk {
        return Err(Error::Shape(format!("X has {} columns, expected s·k² = {}", x.cols(), s * kk)));
    }
    if y.cols() != t || y.rows() != x.rows() {
        return Err(Error::Shape(format!(
            "Y is {:?}, expected ({}, {t})",
            y.shape(),
            x.rows()
        )));
    }
    if x.max_abs() == 0.0 {
        return Err(Error::InvalidArgument("all patches are zero".into()));
    }
    if !(lambda_init > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_init must be > 0, got {lambda_init}")));
    }

    let n = x.rows();
    // β-step design: column i is vec(X_i Ŵ_iᵀ) with ‖Ŵ_i‖_F = 1.
    let norms: Vec<f64> = (0..s).map(|i| channel_norm(kernel, i)).collect();
    let mut design = Matrix::zeros(n * t, s);
    for i in 0..s {
        if norms[i] == 0.0 {
            continue;
        }
        let f = channel_response(x, kernel, i, 1.0 / norms[i]);
        for (row, v) in f.as_slice().iter().enumerate() {
            design[(row, i)] = *v;
        }
    }
    let target = y.as_slice();

    let mut hi = lambda_init;
    let mut beta_hi = lasso_cd(&design, target, hi);
    let mut lo = 0.0;
    let mut beta_lo: Option<Vec<f64>> = None;
    let mut steps = 0;
    while nnz(&beta_hi) > s_prime {
        steps += 1;
        if steps > LAMBDA_GROWTH_STEPS {
            return Err(Error::Infeasible(format!("no penalty reaches {s_prime} channels")));
        }
        lo = hi;
        beta_lo = Some(beta_hi);
        hi *= 2.0;
        beta_hi = lasso_cd(&design, target, hi);
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let b = lasso_cd(&design, target, mid);
        if nnz(&b) <= s_prime {
            hi = mid;
            beta_hi = b;
        } else {
            lo = mid;
            beta_lo = Some(b);
        }
    }

    let mut kept: Vec<usize> = (0..s).filter(|&i| beta_hi[i] != 0.0).collect();
    if kept.len() < s_prime {
        // Rank the remaining channels by their coefficient just below the
        // selected penalty, then by response norm.
        let lower = beta_lo.unwrap_or_else(|| lasso_cd(&design, target, 0.0));
        let mut rest: Vec<usize> = (0..s).filter(|i| !kept.contains(i) && norms[*i] > 0.0).collect();
        rest.sort_by(|&a, &b| lower[b].abs().total_cmp(&lower[a].abs()).then(a.cmp(&b)));
        kept.extend(rest.into_iter().take(s_prime - kept.len()));
        kept.sort_unstable();
    }

    // Residual with lasso-scaled weights.
    let mut approx = Matrix::zeros(n, t);
    for &i in &kept {
        if norms[i] > 0.0 {
            approx = approx.add(&channel_response(x, kernel, i, beta_hi[i] / norms[i]));
        }
    }
    let residual_before_refit = y.sub(&approx).frobenius_norm();

    // W-step: least squares of Y on the kept channels' patches.
    let cols: Vec<usize> = kept.iter().flat_map(|&i| (i * kk)..((i + 1) * kk)).collect();
    let xk_t = x.select_cols(&cols).transpose();
    let y_t = y.transpose();
    let w = match ridge_solve(&y_t, &xk_t, 0.0) {
        Ok(w) => w,
        Err(Error::Singular(_)) => ridge_solve(&y_t, &xk_t, default_ridge(&xk_t))?,
        Err(e) => return Err(e),
    };
    let residual = y_t.sub(&w.matmul(&xk_t)).frobenius_norm();
    let mut refit_kernel = Kernel4D::from_fn(t, kept.len(), k, |o, j, a, b| w[(o, j * kk + a * k + b)])?;
    if let Some(b) = &kernel.bias {
        refit_kernel = refit_kernel.with_bias(b.clone())?;
    }
    let beta = (0..s).map(|i| if kept.contains(&i) { 1.0 } else { 0.0 }).collect();
    Ok(PruneResult {
        beta,
        lasso_beta: beta_hi,
        lambda: hi,
        kept,
        refit_kernel,
        residual,
        residual_before_refit,
    })
}

/// Keeps the `s_prime` input channels with the largest Frobenius norm
/// (ties to the lower index); no refit.
pub fn magnitude_prune(kernel: &Kernel4D, s_prime: usize) -> Result<PruneResult> {
    let s = kernel.s();
    if s_prime == 0 || s_prime > s {
        return Err(Error::InvalidArgument(format!(
            "target channel count must satisfy 1 <= s' <= s = {s}, got {s_prime}"
        )));
    }
    let norms: Vec<f64> = (0..s).map(|i| channel_norm(kernel, i)).collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..s_prime].to_vec();
    kept.sort_unstable();
    let residual = order[s_prime..].iter().map(|&i| norms[i] * norms[i]).sum::<f64>().sqrt();
    Ok(PruneResult {
        beta: (0..s).map(|i| if kept.contains(&i) { 1.0 } else { 0.0 }).collect(),
        lasso_beta: vec![],
        lambda: 0.0,
        refit_kernel: kernel.select_inputs(&kept)?,
        kept,
        residual,
        residual_before_refit: residual,
    })
}
