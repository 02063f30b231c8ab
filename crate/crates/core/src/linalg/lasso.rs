use super::matrix::Matrix;

const MAX_SWEEPS: usize = 10_000;
const COEF_TOL: f64 = 1e-8;

#[inline]
pub fn soft_threshold(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `½‖y − Xβ‖² + λ‖β‖₁`.
///
/// Sweeps until the largest coefficient change is at most `1e-8` or 10,000
/// sweeps have run. Zero columns keep a zero coefficient.
pub fn lasso_cd(x: &Matrix, y: &[f64], lambda: f64) -> Vec<f64> {
    lasso_cd_traced(x, y, lambda).0
}

/// Like [`lasso_cd`], also returning the objective after every sweep.
pub fn lasso_cd_traced(x: &Matrix, y: &[f64], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = x.shape();
    assert_eq!(n, y.len(), "lasso_cd: row mismatch");
    let lambda = lambda.max(0.0);
    let cols: Vec<Vec<f64>> = (0..p).map(|j| x.col(j)).collect();
    let sq_norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let mut beta = vec![0.0; p];
    let mut resid = y.to_vec();
    let mut trace = Vec::new();

    for _ in 0..MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for j in 0..p {
            if sq_norms[j] == 0.0 {
                continue;
            }
            let col = &cols[j];
            let old = beta[j];
            let rho: f64 = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() + sq_norms[j] * old;
            let new = soft_threshold(rho, lambda) / sq_norms[j];
            let delta = new - old;
            if delta != 0.0 {
                resid.iter_mut().zip(col).for_each(|(r, a)| *r -= a * delta);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        trace.push(objective(&resid, &beta, lambda));
        if max_change <= COEF_TOL {
            break;
        }
    }
    (beta, trace)
}

fn objective(resid: &[f64], beta: &[f64], lambda: f64) -> f64 {
    0.5 * resid.iter().map(|r| r * r).sum::<f64>() + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}
