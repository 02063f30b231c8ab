use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DecomposedLayer, Factor, Factors};
use crate::cost::{validate_ranks, Method};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, eig_sym, Matrix};
use crate::tensor::Kernel4D;

const GRAM_COND_LIMIT: f64 = 1e12;
const GRAM_RIDGE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for CpOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-10,
            seed: 0,
        }
    }
}

/// Rank-`r` CP decomposition of the `(s, y, x, t)` tensor by alternating
/// least squares.
pub fn cp_als(kernel: &Kernel4D, r: usize, opts: CpOptions) -> Result<DecomposedLayer> {
    cp_als_traced(kernel, r, opts).map(|(l, _)| l)
}

/// Like [`cp_als`], also returning the reconstruction error after every
/// sweep.
///
/// Initialization draws each column independently from uniform[−1, 1] with
/// a per-column stream, so the first `r` columns of a rank-`r′ > r` start
/// coincide with the rank-`r` start.
pub fn cp_als_traced(kernel: &Kernel4D, r: usize, opts: CpOptions) -> Result<(DecomposedLayer, Vec<f64>)> {
    let (t, s, k) = kernel.dims();
    validate_ranks(Method::Cp, s, t, k, &[r])?;
    if !(opts.tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be >= 0, got {}", opts.tol)));
    }
    let dims = [s, k, k, t];
    // T[i, y, x, o] = W(o, i, x, y), stored row-major over dims.
    let tensor: Vec<f64> = {
        let mut v = vec![0.0; s * k * k * t];
        for o in 0..t {
            for i in 0..s {
                for x in 0..k {
                    for y in 0..k {
                        v[((i * k + y) * k + x) * t + o] = kernel.get(o, i, x, y);
                    }
                }
            }
        }
        v
    };
    let norm = tensor.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut factors: Vec<Matrix> = dims.iter().map(|&d| Matrix::zeros(d, r)).collect();
    for c in 0..r {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add((c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        for f in factors.iter_mut() {
            for i in 0..f.rows() {
                f[(i, c)] = rng.random_range(-1.0..=1.0);
            }
        }
    }

    let mut trace = Vec::new();
    let mut ridged = 0usize;
    let mut iters = 0;
    let mut prev = f64::INFINITY;
    while iters < opts.max_iters {
        iters += 1;
        for mode in 0..4 {
            let mttkrp = mttkrp(&tensor, &dims, &factors, mode);
            let mut gram = Matrix::from_fn(r, r, |_, _| 1.0);
            for (m, f) in factors.iter().enumerate() {
                if m != mode {
                    let g = f.t_matmul(f);
                    gram.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a *= b);
                }
            }
            let (solved, used_ridge) = solve_gram(&gram, &mttkrp)?;
            ridged += used_ridge as usize;
            factors[mode] = solved;
        }
        let err = residual(&tensor, &dims, &factors);
        trace.push(err);
        if err <= 1e-14 * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        if prev.is_finite() && (prev - err).abs() / norm.max(f64::MIN_POSITIVE) < opts.tol {
            break;
        }
        prev = err;
    }

    // Unit columns on the first three factors; norms move to the output factor.
    for c in 0..r {
        let mut scale = 1.0;
        for f in factors.iter_mut().take(3) {
            let n = (0..f.rows()).map(|i| f[(i, c)] * f[(i, c)]).sum::<f64>().sqrt();
            if n > 0.0 {
                for i in 0..f.rows() {
                    f[(i, c)] /= n;
                }
                scale *= n;
            }
        }
        let out = &mut factors[3];
        for i in 0..out.rows() {
            out[(i, c)] *= scale;
        }
    }

    let final_error = trace.last().copied().unwrap_or(norm);
    let mut it = factors.into_iter();
    let mut layer = DecomposedLayer::new(
        Factors::Cp {
            input: Factor::from_matrix(&it.next().unwrap()),
            vertical: Factor::from_matrix(&it.next().unwrap()),
            horizontal: Factor::from_matrix(&it.next().unwrap()),
            output: Factor::from_matrix(&it.next().unwrap()),
        },
        vec![r],
        (t, s, k),
        kernel.bias.clone(),
    )?;
    let md = &mut layer.metadata;
    md.insert("solver".into(), "als".into());
    md.insert("init".into(), format!("uniform[-1,1] seed={}", opts.seed));
    md.insert("max_iters".into(), opts.max_iters.to_string());
    md.insert("tol".into(), format!("{:e}", opts.tol));
    md.insert("iterations".into(), iters.to_string());
    md.insert("final_error".into(), format!("{final_error:e}"));
    md.insert(
        "relative_error".into(),
        format!("{:e}", final_error / norm.max(f64::MIN_POSITIVE)),
    );
    md.insert("converged".into(), (iters < opts.max_iters).to_string());
    md.insert("ridged_solves".into(), ridged.to_string());
    Ok((layer, trace))
}

/// Matricized-tensor times Khatri-Rao product for one mode.
fn mttkrp(tensor: &[f64], dims: &[usize; 4], factors: &[Matrix], mode: usize) -> Matrix {
    let r = factors[0].cols();
    let mut out = Matrix::zeros(dims[mode], r);
    let mut prod = vec![0.0; r];
    let mut idx = 0;
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for c in 0..dims[2] {
                for d in 0..dims[3] {
                    let v = tensor[idx];
                    idx += 1;
                    if v == 0.0 {
                        continue;
                    }
                    let ids = [a, b, c, d];
                    prod.iter_mut().for_each(|p| *p = v);
                    for m in 0..4 {
                        if m != mode {
                            let row = factors[m].row(ids[m]);
                            prod.iter_mut().zip(row).for_each(|(p, f)| *p *= f);
                        }
                    }
                    let dst = out.row_mut(ids[mode]);
                    dst.iter_mut().zip(&prod).for_each(|(o, p)| *o += p);
                }
            }
        }
    }
    out
}

/// Solves `A G = M` for `A` (G symmetric PSD). Adds a ridge when `G` is
/// badly conditioned; the flag reports whether it did.
fn solve_gram(gram: &Matrix, mttkrp: &Matrix) -> Result<(Matrix, bool)> {
    let eig = eig_sym(gram)?;
    let max = eig.values.first().copied().unwrap_or(0.0);
    let min = eig.values.last().copied().unwrap_or(0.0);
    let ill = min <= 0.0 || max / min > GRAM_COND_LIMIT;
    let mut g = gram.clone();
    if ill {
        let bump = GRAM_RIDGE * max.max(f64::MIN_POSITIVE);
        for i in 0..g.rows() {
            g[(i, i)] += bump;
        }
    }
    let rhs = mttkrp.transpose();
    let x = match cholesky(&g) {
        Ok(l) => cholesky_solve(&l, &rhs),
        Err(_) => {
            // Pseudo-inverse on the spectrum above the noise floor.
            let floor = max * 1e-12;
            let pinv = eig.map_values(|v| if v > floor { 1.0 / v } else { 0.0 });
            pinv.matmul(&rhs)
        }
    };
    Ok((x.transpose(), ill))
}

fn residual(tensor: &[f64], dims: &[usize; 4], factors: &[Matrix]) -> f64 {
    let r = factors[0].cols();
    let mut acc = 0.0;
    let mut idx = 0;
    let mut ab = vec![0.0; r];
    let mut abc = vec![0.0; r];
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for (p, (x, y)) in ab.iter_mut().zip(factors[0].row(a).iter().zip(factors[1].row(b))) {
                *p = x * y;
            }
            for c in 0..dims[2] {
                for (p, (x, y)) in abc.iter_mut().zip(ab.iter().zip(factors[2].row(c))) {
                    *p = x * y;
                }
                for d in 0..dims[3] {
                    let approx: f64 = abc.iter().zip(factors[3].row(d)).map(|(x, y)| x * y).sum();
                    let diff = tensor[idx] - approx;
                    acc += diff * diff;
                    idx += 1;
                }
            }
        }
    }
    acc.sqrt()
}
