use super::{DecomposedLayer, Factor, Factors, SpatialOrder};
use crate::cost::{validate_ranks, Method};
use crate::error::Result;
use crate::linalg::{svd, Matrix, SvdResult};
use crate::tensor::{matricize_spatial, matricize_weight, Kernel4D};

/// Rank-`r` weight SVD: a `k×k` convolution `s → r` followed by a `1×1`
/// convolution `r → t`, split as `U√S` and `√S Vᵀ`.
pub fn weight_svd(kernel: &Kernel4D, r: usize) -> Result<DecomposedLayer> {
    let (t, s, k) = kernel.dims();
    validate_ranks(Method::WeightSvd, s, t, k, &[r])?;
    let dec = svd(&matricize_weight(kernel))?;
    let (first, second) = sqrt_split(&dec, r);
    let mut layer = DecomposedLayer::new(
        Factors::WeightSvd {
            first: Factor::from_matrix(&first),
            second: Factor::from_matrix(&second),
        },
        vec![r],
        (t, s, k),
        kernel.bias.clone(),
    )?;
    layer.metadata.insert("tail_energy".into(), format!("{:e}", dec.tail_energy(r)));
    Ok(layer)
}

/// Rank-`r` spatial SVD with the horizontal factor first.
pub fn spatial_svd(kernel: &Kernel4D, r: usize) -> Result<DecomposedLayer> {
    spatial_svd_ordered(kernel, r, SpatialOrder::HorizontalFirst)
}

/// Rank-`r` spatial SVD; `order` picks which spatial axis the first layer
/// spans.
pub fn spatial_svd_ordered(kernel: &Kernel4D, r: usize, order: SpatialOrder) -> Result<DecomposedLayer> {
    let (t, s, k) = kernel.dims();
    validate_ranks(Method::SpatialSvd, s, t, k, &[r])?;
    let m = match order {
        SpatialOrder::HorizontalFirst => matricize_spatial(kernel),
        // rows (i_s, y), cols (i_t, x)
        SpatialOrder::VerticalFirst => Matrix::from_fn(s * k, t * k, |row, col| {
            kernel.get(col / k, row / k, col % k, row % k)
        }),
    };
    let dec = svd(&m)?;
    let (a, b) = sqrt_split(&dec, r);
    // a: (s·k) × r is already (s, k, r) row-major; b: r × (t·k) is (r, t, k).
    let mut layer = DecomposedLayer::new(
        Factors::SpatialSvd {
            first: Factor::new(vec![s, k, r], a.into_vec())?,
            second: Factor::new(vec![r, t, k], b.into_vec())?,
            order,
        },
        vec![r],
        (t, s, k),
        kernel.bias.clone(),
    )?;
    layer.metadata.insert("order".into(), order.name().into());
    layer.metadata.insert("tail_energy".into(), format!("{:e}", dec.tail_energy(r)));
    Ok(layer)
}

/// `(U_r √S_r, √S_r V_rᵀ)`, zero-padded when `r` exceeds the available
/// singular values.
fn sqrt_split(dec: &SvdResult, r: usize) -> (Matrix, Matrix) {
    let p = dec.s.len();
    let root: Vec<f64> = (0..r).map(|j| if j < p { dec.s[j].sqrt() } else { 0.0 }).collect();
    let left = Matrix::from_fn(dec.u.rows(), r, |i, j| if j < p { dec.u[(i, j)] * root[j] } else { 0.0 });
    let right = Matrix::from_fn(r, dec.v.rows(), |j, i| if j < p { dec.v[(i, j)] * root[j] } else { 0.0 });
    (left, right)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel(t: usize, s: usize, k: usize) -> Kernel4D {
        Kernel4D::from_fn(t, s, k, |o, i, x, y| ((o * 7 + i * 3 + x * 5 + y * 11) % 13) as f64 - 6.0).unwrap()
    }

    #[test]
    fn weight_svd_full_rank_exact() {
        let w = kernel(5, 3, 3);
        let layer = weight_svd(&w, 5).unwrap();
        assert!(layer.reconstruct().distance(&w) <= 1e-10 * w.frobenius_norm());
    }

    #[test]
    fn spatial_orders_agree_at_full_rank() {
        let w = kernel(3, 2, 3);
        for order in [SpatialOrder::HorizontalFirst, SpatialOrder::VerticalFirst] {
            let layer = spatial_svd_ordered(&w, 6, order).unwrap();
            assert!(layer.reconstruct().distance(&w) <= 1e-10 * w.frobenius_norm());
        }
    }

    #[test]
    fn rank_bounds() {
        let w = kernel(2, 2, 3);
        assert!(weight_svd(&w, 3).is_err());
        assert!(weight_svd(&w, 0).is_err());
        assert!(spatial_svd(&w, 7).is_err());
    }
}
