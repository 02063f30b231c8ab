//! Data-optimized refinements fitted on sampled patches.
//!
//! A [`PatchBatch`] holds `n` flattened `k × k × s` input patches (row layout
//! matches [`matricize_weight`], so a patch times the weight matrix is the
//! layer response at the patch centre) taken from two sources at the same
//! locations: the uncompressed model (`inputs`) and the compressed prefix
//! (`cur_inputs`). Responses are stored one sample per row.
//!
//! Every refinement produces `M` and a bias with the layer output modelled as
//! `M z + new_bias`, where `z` is the wrapped layer's own response
//! (including its bias). `M` maps compressed responses onto reference
//! responses, so the intercept is `ȳ − M z̄`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{validate_ranks, Method};
use crate::decomp::{reconstruct, spatial_svd, DecomposedLayer, Factor, Factors};
use crate::error::{Error, Result};
use crate::linalg::{default_ridge, eig_sym, reduced_rank_regression, ridge_solve, Matrix};
use crate::tensor::{matricize_weight, FeatureMap, Kernel4D};

/// Input maps of one image seen by the uncompressed model and by the
/// compressed prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPair {
    pub reference: FeatureMap,
    pub current: FeatureMap,
}

impl MapPair {
    /// A pair with no prefix error.
    pub fn same(map: FeatureMap) -> Self {
        Self {
            current: map.clone(),
            reference: map,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `n × k²s` patches from the uncompressed model.
    pub inputs: Matrix,
    /// `n × k²s` patches from the compressed prefix, same locations.
    pub cur_inputs: Matrix,
    /// `n × t` reference responses `Y` (empty until outputs are attached).
    pub ref_outputs: Matrix,
    /// `n × t` responses `Ẑ` of the layer to the prefix patches.
    pub cur_outputs: Matrix,
    pub y_mean: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub k: usize,
    pub channels: usize,
    /// `(pair index, x, y)` of every sample.
    pub locations: Vec<(usize, usize, usize)>,
}

/// Draws `per_image` uniformly random centres from every pair and extracts
/// zero-padded `k × k` patches from both maps at each centre.
pub fn sample_patches(pairs: &[MapPair], per_image: usize, k: usize, seed: u64) -> Result<PatchBatch> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no feature maps to sample".into()));
    }
    if per_image == 0 {
        return Err(Error::InvalidArgument("per_image must be >= 1".into()));
    }
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidKernel(format!("patch size must be odd, got {k}")));
    }
    let s = pairs[0].reference.channels();
    for (idx, p) in pairs.iter().enumerate() {
        let (a, b) = (&p.reference, &p.current);
        if a.channels() != s || (a.channels(), a.h(), a.w()) != (b.channels(), b.h(), b.w()) {
            return Err(Error::Shape(format!("map pair {idx} does not match the first pair's channels or its own partner")));
        }
    }
    let n = pairs.len() * per_image;
    let width = k * k * s;
    let delta = (k / 2) as isize;
    let mut inputs = Vec::with_capacity(n * width);
    let mut cur = Vec::with_capacity(n * width);
    let mut locations = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (idx, p) in pairs.iter().enumerate() {
        for _ in 0..per_image {
            let x = rng.random_range(0..p.reference.h());
            let y = rng.random_range(0..p.reference.w());
            locations.push((idx, x, y));
            for (map, dst) in [(&p.reference, &mut inputs), (&p.current, &mut cur)] {
                for a in 0..k {
                    for b in 0..k {
                        let (sx, sy) = (x as isize + a as isize - delta, y as isize + b as isize - delta);
                        for c in 0..s {
                            dst.push(map.get_padded(c, sx, sy));
                        }
                    }
                }
            }
        }
    }
    Ok(PatchBatch {
        inputs: Matrix::from_vec(n, width, inputs),
        cur_inputs: Matrix::from_vec(n, width, cur),
        ref_outputs: Matrix::zeros(n, 0),
        cur_outputs: Matrix::zeros(n, 0),
        y_mean: vec![],
        z_mean: vec![],
        k,
        channels: s,
        locations,
    })
}

/// Responses of `kernel` (with bias) to patch rows.
pub fn patch_outputs(kernel: &Kernel4D, patches: &Matrix) -> Result<Matrix> {
    let (_, s, k) = kernel.dims();
    if patches.cols() != k * k * s {
        return Err(Error::Shape(format!(
            "patches have {} columns, kernel needs {}",
            patches.cols(),
            k * k * s
        )));
    }
    let mut out = patches.matmul(&matricize_weight(kernel));
    if let Some(b) = &kernel.bias {
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
    }
    Ok(out)
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fills `Y = W x + b` and `Ẑ = W x̂ + b` for the layer being compressed.
    pub fn with_outputs(mut self, kernel: &Kernel4D) -> Result<Self> {
        self.ref_outputs = patch_outputs(kernel, &self.inputs)?;
        self.cur_outputs = patch_outputs(kernel, &self.cur_inputs)?;
        self.y_mean = self.ref_outputs.column_means();
        self.z_mean = self.cur_outputs.column_means();
        Ok(self)
    }

    /// Fewer samples than output channels leaves the covariance singular.
    pub fn underdetermined(&self) -> bool {
        self.len() < self.ref_outputs.cols()
    }

    fn require_outputs(&self) -> Result<usize> {
        let t = self.ref_outputs.cols();
        if t == 0 || self.cur_outputs.cols() != t {
            return Err(Error::InvalidArgument("patch batch has no attached outputs".into()));
        }
        Ok(t)
    }
}

/// What a [`RefinedLayer`] post-multiplies.
#[derive(Clone, Debug, PartialEq)]
pub enum Wrapped {
    Kernel(Kernel4D),
    Layer(DecomposedLayer),
}

#[derive(Clone, Debug)]
pub struct RefinedLayer {
    /// `t × t`, `M = left · right`.
    pub m: Matrix,
    /// `t × rank`
    pub left: Matrix,
    /// `rank × t`
    pub right: Matrix,
    pub new_bias: Vec<f64>,
    pub wrapped: Wrapped,
    pub rank: usize,
    /// `‖Ŷ − M Ẑ‖_F` on the centred fitting data.
    pub residual: f64,
}

impl RefinedLayer {
    /// `M z + new_bias` for every row `z`.
    pub fn apply(&self, z: &Matrix) -> Matrix {
        let mut out = z.matmul_t(&self.m);
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(&self.new_bias).for_each(|(v, b)| *v += b);
        }
        out
    }

    /// Bias of the compressed layer: `M b_wrapped + new_bias`.
    fn folded_bias(&self, wrapped_bias: Option<&Vec<f64>>) -> Vec<f64> {
        let mut b = self.new_bias.clone();
        if let Some(wb) = wrapped_bias {
            b.iter_mut().zip(self.m.matvec(wb)).for_each(|(x, y)| *x += y);
        }
        b
    }

    /// The compressed architecture. A wrapped kernel becomes a rank-`rank`
    /// weight-SVD pair (`right · W`, then `left`); a wrapped spatial-SVD layer
    /// keeps its shape with the second factor replaced by `M · W_v`.
    pub fn to_layer(&self) -> Result<DecomposedLayer> {
        match &self.wrapped {
            Wrapped::Kernel(kernel) => {
                let (t, s, k) = kernel.dims();
                let first = matricize_weight(kernel).matmul_t(&self.right);
                let second = self.left.transpose();
                let mut layer = DecomposedLayer::new(
                    Factors::WeightSvd {
                        first: Factor::from_matrix(&first),
                        second: Factor::from_matrix(&second),
                    },
                    vec![self.rank],
                    (t, s, k),
                    Some(self.folded_bias(kernel.bias.as_ref())),
                )?;
                layer.metadata.insert("refined".into(), "data".into());
                Ok(layer)
            }
            Wrapped::Layer(inner) => match &inner.factors {
                Factors::SpatialSvd { first, second, order } => {
                    let (t, _, k) = inner.source_dims;
                    let r = inner.ranks[0];
                    let mut refined = Factor::zeros(vec![r, t, k]);
                    for a in 0..r {
                        for o in 0..t {
                            for y in 0..k {
                                let v = (0..t).map(|p| self.m[(o, p)] * second.at(&[a, p, y])).sum();
                                refined.set(&[a, o, y], v);
                            }
                        }
                    }
                    let mut layer = DecomposedLayer::new(
                        Factors::SpatialSvd {
                            first: first.clone(),
                            second: refined,
                            order: *order,
                        },
                        inner.ranks.clone(),
                        inner.source_dims,
                        Some(self.folded_bias(inner.bias.as_ref())),
                    )?;
                    layer.metadata = inner.metadata.clone();
                    layer.metadata.insert("refined".into(), "data".into());
                    Ok(layer)
                }
                other => Err(Error::MethodMismatch {
                    expected: Method::SpatialSvd.name(),
                    got: other.method().name(),
                }),
            },
        }
    }
}

fn centered_t(m: &Matrix, mean: &[f64]) -> Matrix {
    m.center_columns(mean).transpose()
}

/// Data SVD: PCA projector onto the top-`r` principal directions of the
/// reference responses `y` (`n × t`).
pub fn data_svd(kernel: &Kernel4D, y: &Matrix, r: usize) -> Result<RefinedLayer> {
    let t = kernel.t();
    if y.cols() != t {
        return Err(Error::Shape(format!("responses have {} columns, kernel has t = {t}", y.cols())));
    }
    if r == 0 || r > t {
        return Err(Error::RankOutOfRange {
            what: "data SVD",
            rank: r,
            max: t,
        });
    }
    let mean = y.column_means();
    let yc = centered_t(y, &mean);
    let eig = eig_sym(&yc.matmul_t(&yc))?;
    let u_r = eig.vectors.leading_cols(r);
    let m = u_r.matmul_t(&u_r);
    // Direct evaluation; its square equals the discarded eigenvalue sum.
    let residual = yc.sub(&m.matmul(&yc)).frobenius_norm();
    let mut new_bias = mean.clone();
    new_bias.iter_mut().zip(m.matvec(&mean)).for_each(|(b, v)| *b -= v);
    Ok(RefinedLayer {
        right: u_r.transpose(),
        left: u_r,
        m,
        new_bias,
        wrapped: Wrapped::Kernel(kernel.clone()),
        rank: r,
        residual,
    })
}

/// Asymmetric data SVD: rank-`r` `M` minimizing `‖Ŷ − M Ẑ‖_F` between the
/// centred reference and compressed-prefix responses.
pub fn asym_data_svd(batch: &PatchBatch, kernel: &Kernel4D, r: usize) -> Result<RefinedLayer> {
    let t = batch.require_outputs()?;
    if t != kernel.t() {
        return Err(Error::Shape(format!("batch has {t} outputs, kernel has {}", kernel.t())));
    }
    fit_rrr(&batch.ref_outputs, &batch.cur_outputs, r, Wrapped::Kernel(kernel.clone()))
}

/// Rank-`r` fit of `y ≈ M z + b` over rows; `M` comes from reduced-rank
/// regression on centred data.
fn fit_rrr(y: &Matrix, z: &Matrix, r: usize, wrapped: Wrapped) -> Result<RefinedLayer> {
    let t = y.cols();
    if r == 0 || r > t {
        return Err(Error::RankOutOfRange {
            what: "asymmetric data SVD",
            rank: r,
            max: t,
        });
    }
    let (ym, zm) = (y.column_means(), z.column_means());
    let rrr = reduced_rank_regression(&centered_t(y, &ym), &centered_t(z, &zm), r, 0.0)?;
    let mut new_bias = ym;
    new_bias.iter_mut().zip(rrr.m.matvec(&zm)).for_each(|(b, v)| *b -= v);
    Ok(RefinedLayer {
        m: rrr.m,
        left: rrr.left,
        right: rrr.right,
        new_bias,
        wrapped,
        rank: r,
        residual: rrr.residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReluAsymOptions {
    pub lambda_schedule: Vec<f64>,
    /// Alternations per schedule value.
    pub max_outer: usize,
    pub activation: Activation,
}

impl Default for ReluAsymOptions {
    fn default() -> Self {
        Self {
            lambda_schedule: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            max_outer: 2,
            activation: Activation::Relu,
        }
    }
}

/// One record of the relaxed objective after a sub-step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReluTracePoint {
    pub lambda: f64,
    pub relaxed: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct ReluAsymResult {
    pub layer: RefinedLayer,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub trace: Vec<ReluTracePoint>,
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Exact minimizer over `z` of `(relu(y) − relu(z))² + λ (z − a)²`.
pub fn relu_z_step(y: f64, a: f64, lambda: f64) -> f64 {
    let c = relu(y);
    let f = |z: f64| (c - relu(z)).powi(2) + lambda * (z - a).powi(2);
    let pos = ((c + lambda * a) / (1.0 + lambda)).max(0.0);
    let neg = a.min(0.0);
    if f(pos) <= f(neg) {
        pos
    } else {
        neg
    }
}

/// `‖relu(Y) − relu(M Ẑ + b)‖²_F`
fn relu_objective(y: &Matrix, pred: &Matrix) -> f64 {
    y.as_slice()
        .iter()
        .zip(pred.as_slice())
        .map(|(a, b)| (relu(*a) - relu(*b)).powi(2))
        .sum()
}

/// Asymmetric data SVD through a ReLU: alternates an elementwise `Z` step
/// with a rank-`r` `(M, b)` refit against `Z`, over an increasing penalty
/// schedule. Starts from [`asym_data_svd`] and returns the best iterate by
/// the unrelaxed objective.
pub fn relu_asym(batch: &PatchBatch, kernel: &Kernel4D, r: usize, opts: &ReluAsymOptions) -> Result<ReluAsymResult> {
    if opts.activation != Activation::Relu {
        return Err(Error::InvalidArgument(format!(
            "only ReLU has a closed-form Z step, got {:?}",
            opts.activation
        )));
    }
    if opts.lambda_schedule.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidArgument("lambda schedule values must be > 0".into()));
    }
    let y = &batch.ref_outputs;
    let zhat = &batch.cur_outputs;
    let mut layer = asym_data_svd(batch, kernel, r)?;
    let initial = relu_objective(y, &layer.apply(zhat));
    let mut best = (initial, layer.clone());
    let mut trace = Vec::new();

    for &lambda in &opts.lambda_schedule {
        for _ in 0..opts.max_outer {
            let a = layer.apply(zhat);
            let z = Matrix::from_fn(y.rows(), y.cols(), |i, j| relu_z_step(y[(i, j)], a[(i, j)], lambda));
            let relaxed_of = |pred: &Matrix| {
                relu_objective(y, &z)
                    + lambda * z.as_slice().iter().zip(pred.as_slice()).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
            };
            trace.push(ReluTracePoint {
                lambda,
                relaxed: relaxed_of(&a),
                objective: relu_objective(y, &a),
            });
            layer = fit_rrr(&z, zhat, r, Wrapped::Kernel(kernel.clone()))?;
            let pred = layer.apply(zhat);
            let objective = relu_objective(y, &pred);
            trace.push(ReluTracePoint {
                lambda,
                relaxed: relaxed_of(&pred),
                objective,
            });
            if objective < best.0 {
                best = (objective, layer.clone());
            }
        }
    }
    let (final_objective, mut layer) = best;
    layer.residual = {
        let ym = y.column_means();
        let zm = zhat.column_means();
        centered_t(y, &ym).sub(&layer.m.matmul(&centered_t(zhat, &zm))).frobenius_norm()
    };
    Ok(ReluAsymResult {
        layer,
        initial_objective: initial,
        final_objective,
        trace,
    })
}

/// Asym3D: spatial SVD at rank `r_s`, then a rank-`r_d` data fit that splits
/// the second spatial factor into a `1 × k` layer with `r_d` outputs and a
/// `1 × 1` layer back to `t` channels.
pub fn asym3d(kernel: &Kernel4D, batch: &PatchBatch, r_s: usize, r_d: usize) -> Result<DecomposedLayer> {
    let (t, s, k) = kernel.dims();
    validate_ranks(Method::Asym3d, s, t, k, &[r_s, r_d])?;
    let bt = batch.require_outputs()?;
    if bt != t {
        return Err(Error::Shape(format!("batch has {bt} outputs, kernel has t = {t}")));
    }
    let spatial = spatial_svd(kernel, r_s)?;
    let z = patch_outputs(&reconstruct(&spatial), &batch.cur_inputs)?;
    let fit = fit_rrr(&batch.ref_outputs, &z, r_d, Wrapped::Layer(spatial.clone()))?;

    let Factors::SpatialSvd { first, second, .. } = &spatial.factors else {
        unreachable!("spatial_svd returns spatial factors")
    };
    let mut middle = Factor::zeros(vec![r_s, r_d, k]);
    for a in 0..r_s {
        for d in 0..r_d {
            for y in 0..k {
                let v = (0..t).map(|o| fit.right[(d, o)] * second.at(&[a, o, y])).sum();
                middle.set(&[a, d, y], v);
            }
        }
    }
    let bias = fit.folded_bias(spatial.bias.as_ref());
    let mut layer = DecomposedLayer::new(
        Factors::Asym3d {
            first: first.clone(),
            second: middle,
            pointwise: Factor::from_matrix(&fit.left),
        },
        vec![r_s, r_d],
        (t, s, k),
        Some(bias),
    )?;
    layer.metadata.insert("spatial_tail_energy".into(), spatial.metadata["tail_energy"].clone());
    layer.metadata.insert("data_residual".into(), format!("{:e}", fit.residual));
    Ok(layer)
}

/// Outcome of [`spatial_refine`].
#[derive(Clone, Debug)]
pub struct SpatialRefineResult {
    pub refined: RefinedLayer,
    /// `‖Y − Ẑ‖_F` with the unrefined layer.
    pub residual_before: f64,
    /// `‖Y − (M Ẑ + b)‖_F` after refinement.
    pub residual_after: f64,
    /// False when the fitted `M` did not help and identity was kept.
    pub applied: bool,
}

/// Full-rank least-squares refinement of the second spatial-SVD factor
/// (`W_v ← M W_v`) against the reference responses.
pub fn spatial_refine(layer: &DecomposedLayer, batch: &PatchBatch) -> Result<SpatialRefineResult> {
    if layer.method() != Method::SpatialSvd {
        return Err(Error::MethodMismatch {
            expected: Method::SpatialSvd.name(),
            got: layer.method().name(),
        });
    }
    let t = batch.require_outputs()?;
    if t != layer.source_dims.0 {
        return Err(Error::Shape(format!("batch has {t} outputs, layer has t = {}", layer.source_dims.0)));
    }
    let y = &batch.ref_outputs;
    let z = patch_outputs(&reconstruct(layer), &batch.cur_inputs)?;
    let (ym, zm) = (y.column_means(), z.column_means());
    let (yc, zc) = (centered_t(y, &ym), centered_t(&z, &zm));
    let m = ridge_solve(&yc, &zc, default_ridge(&zc))?;
    let mut new_bias = ym;
    new_bias.iter_mut().zip(m.matvec(&zm)).for_each(|(b, v)| *b -= v);
    let mut refined = RefinedLayer {
        left: m.clone(),
        right: Matrix::identity(t),
        residual: yc.sub(&m.matmul(&zc)).frobenius_norm(),
        m,
        new_bias,
        wrapped: Wrapped::Layer(layer.clone()),
        rank: t,
    };
    let before = y.sub(&z).frobenius_norm();
    let mut after = y.sub(&refined.apply(&z)).frobenius_norm();
    let applied = after <= before;
    if !applied {
        refined.m = Matrix::identity(t);
        refined.left = Matrix::identity(t);
        refined.new_bias = vec![0.0; t];
        refined.residual = yc.sub(&zc).frobenius_norm();
        after = before;
    }
    Ok(SpatialRefineResult {
        refined,
        residual_before: before,
        residual_after: after,
        applied,
    })
}
