use super::{DecomposedLayer, Factor, Factors};
use crate::cost::{validate_ranks, Method};
use crate::error::Result;
use crate::linalg::{leading_left_vectors, svd, Matrix};
use crate::tensor::Kernel4D;

/// TT-SVD of the `(s, x, y, t)` tensor: truncate the `s` bond, then the `x`
/// bond, then the `y` bond. Each truncation tail is recorded in metadata.
pub fn tt_svd(kernel: &Kernel4D, r1: usize, r2: usize, r3: usize) -> Result<DecomposedLayer> {
    let (t, s, k) = kernel.dims();
    validate_ranks(Method::Tt, s, t, k, &[r1, r2, r3])?;

    // C1: s × (x, y, t)
    let c1 = Matrix::from_fn(s, k * k * t, |i, c| {
        let (xy, o) = (c / t, c % t);
        kernel.get(o, i, xy / k, xy % k)
    });
    let (w1, rest1, tail1) = truncate(&c1, r1)?;

    // C2: (r1, x) × (y, t)
    let c2 = Matrix::from_vec(r1 * k, k * t, rest1.into_vec());
    let (w2, rest2, tail2) = truncate(&c2, r2)?;

    // C3: (r2, y) × t
    let c3 = Matrix::from_vec(r2 * k, t, rest2.into_vec());
    let (w3, w4, tail3) = truncate(&c3, r3)?;

    let mut layer = DecomposedLayer::new(
        Factors::Tt {
            first: Factor::from_matrix(&w1),
            second: Factor::new(vec![r1, k, r2], w2.into_vec())?,
            third: Factor::new(vec![r2, k, r3], w3.into_vec())?,
            fourth: Factor::from_matrix(&w4),
        },
        vec![r1, r2, r3],
        (t, s, k),
        kernel.bias.clone(),
    )?;
    layer
        .metadata
        .insert("tail_energies".into(), format!("{tail1:e},{tail2:e},{tail3:e}"));
    Ok(layer)
}

/// Leading `r` left vectors `U`, the projected remainder `Uᵀ C`, and the
/// discarded squared singular values.
fn truncate(c: &Matrix, r: usize) -> Result<(Matrix, Matrix, f64)> {
    let tail = svd(c)?.tail_energy(r);
    let u = leading_left_vectors(c, r)?;
    let rest = u.t_matmul(c);
    Ok((u, rest, tail))
}
