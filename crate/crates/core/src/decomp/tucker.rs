use super::{reconstruct, DecomposedLayer, Factor, Factors};
use crate::cost::{validate_ranks, Method};
use crate::error::Result;
use crate::linalg::{leading_left_vectors, Matrix};
use crate::tensor::Kernel4D;

/// Partial Tucker-2 over the channel modes: HOSVD start, then HOOI sweeps
/// until the relative error change drops below `tol` or `max_iters` sweeps.
pub fn tucker_hooi(kernel: &Kernel4D, r1: usize, r2: usize, max_iters: usize, tol: f64) -> Result<DecomposedLayer> {
    tucker_hooi_traced(kernel, r1, r2, max_iters, tol).map(|(l, _)| l)
}

/// Like [`tucker_hooi`], also returning the reconstruction error after the
/// HOSVD start (first entry) and after every sweep.
pub fn tucker_hooi_traced(
    kernel: &Kernel4D,
    r1: usize,
    r2: usize,
    max_iters: usize,
    tol: f64,
) -> Result<(DecomposedLayer, Vec<f64>)> {
    let (t, s, k) = kernel.dims();
    validate_ranks(Method::Tucker, s, t, k, &[r1, r2])?;
    let kk = k * k;

    // Mode-t unfolding is the kernel itself viewed as t × (s·k²).
    let mode_t = Matrix::from_vec(t, s * kk, kernel.data().to_vec());
    let mode_s = Matrix::from_fn(s, t * kk, |i, c| {
        let (o, xy) = (c / kk, c % kk);
        kernel.data()[(o * s + i) * kk + xy]
    });
    let mut u1 = leading_left_vectors(&mode_s, r1)?;
    let mut u2 = leading_left_vectors(&mode_t, r2)?;

    let build = |u1: &Matrix, u2: &Matrix| -> Result<DecomposedLayer> {
        let core = core_tensor(kernel, u1, u2);
        DecomposedLayer::new(
            Factors::Tucker {
                input: Factor::from_matrix(u1),
                core,
                output: Factor::from_matrix(u2),
            },
            vec![r1, r2],
            (t, s, k),
            kernel.bias.clone(),
        )
    };
    let err = |l: &DecomposedLayer| reconstruct(l).distance(kernel);

    let mut layer = build(&u1, &u2)?;
    let hosvd_error = err(&layer);
    let mut trace = vec![hosvd_error];
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        // Fix U2: project outputs, refresh U1 from the mode-s unfolding.
        let proj_t = Matrix::from_fn(s, r2 * kk, |i, c| {
            let (b, xy) = (c / kk, c % kk);
            (0..t).map(|o| u2[(o, b)] * kernel.data()[(o * s + i) * kk + xy]).sum()
        });
        u1 = leading_left_vectors(&proj_t, r1)?;
        // Fix U1: project inputs, refresh U2 from the mode-t unfolding.
        let proj_s = Matrix::from_fn(t, r1 * kk, |o, c| {
            let (a, xy) = (c / kk, c % kk);
            (0..s).map(|i| u1[(i, a)] * kernel.data()[(o * s + i) * kk + xy]).sum()
        });
        u2 = leading_left_vectors(&proj_s, r2)?;

        let candidate = build(&u1, &u2)?;
        let e = err(&candidate);
        let prev = *trace.last().unwrap();
        // Sweeps are monotone in exact arithmetic; keep the better of the two
        // so rounding can never make the returned layer worse.
        if e <= prev {
            layer = candidate;
            trace.push(e);
        } else {
            trace.push(prev);
        }
        let scale = prev.max(f64::MIN_POSITIVE);
        if (prev - e).abs() / scale < tol || e == 0.0 {
            break;
        }
    }
    layer.metadata.insert("init".into(), "hosvd".into());
    layer.metadata.insert("iterations".into(), iters.to_string());
    layer.metadata.insert("hosvd_error".into(), format!("{hosvd_error:e}"));
    layer
        .metadata
        .insert("final_error".into(), format!("{:e}", trace.last().copied().unwrap_or(0.0)));
    Ok((layer, trace))
}

/// `G(x, y, a, b) = Σ_{i,o} U1(i, a) U2(o, b) W(o, i, x, y)`.
fn core_tensor(kernel: &Kernel4D, u1: &Matrix, u2: &Matrix) -> Factor {
    let (t, s, k) = kernel.dims();
    let kk = k * k;
    let (r1, r2) = (u1.cols(), u2.cols());
    // H(o, a, xy) = Σ_i U1(i, a) W(o, i, xy)
    let mut h = vec![0.0; t * r1 * kk];
    for o in 0..t {
        for i in 0..s {
            let src = &kernel.data()[(o * s + i) * kk..(o * s + i + 1) * kk];
            for a in 0..r1 {
                let c = u1[(i, a)];
                if c == 0.0 {
                    continue;
                }
                let dst = &mut h[(o * r1 + a) * kk..(o * r1 + a + 1) * kk];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d += c * v);
            }
        }
    }
    let mut g = Factor::zeros(vec![k, k, r1, r2]);
    for xy in 0..kk {
        for a in 0..r1 {
            for b in 0..r2 {
                let v: f64 = (0..t).map(|o| u2[(o, b)] * h[(o * r1 + a) * kk + xy]).sum();
                g.set(&[xy / k, xy % k, a, b], v);
            }
        }
    }
    g
}
