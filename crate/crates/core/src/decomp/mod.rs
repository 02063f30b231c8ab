//! Data-free factorizations of a [`Kernel4D`] and their staged forward
//! passes.
//!
//! Each method stores its factors with the index order of its defining sum:
//!
//! - weight SVD: `first` is `k²s × r` (rows `(x, y, s)`), `second` is `r × t`;
//! - spatial SVD: `first` is `(s, k, r)`, `second` is `(r, t, k)`; which
//!   spatial axis each factor spans is given by [`SpatialOrder`];
//! - CP over the `(s, y, x, t)` tensor: `input` `s × r`, `vertical` `k × r`
//!   (y), `horizontal` `k × r` (x), `output` `t × r`;
//! - Tucker-2: `input` `s × r₁`, `core` `(k, k, r₁, r₂)`, `output` `t × r₂`;
//! - tensor train over `(s, x, y, t)`: `first` `s × r₁`, `second`
//!   `(r₁, k, r₂)`, `third` `(r₂, k, r₃)`, `fourth` `r₃ × t`;
//! - Asym3D: `first` `(s, k, r_s)` along x, `second` `(r_s, r_d, k)` along
//!   y, `pointwise` `t × r_d`.

mod cp;
mod svd_methods;
mod tt;
mod tucker;

pub use cp::{cp_als, cp_als_traced, CpOptions};
pub use svd_methods::{spatial_svd, spatial_svd_ordered, weight_svd};
pub use tt::tt_svd;
pub use tucker::{tucker_hooi, tucker_hooi_traced};

use std::collections::BTreeMap;

use crate::cost::{self, LayerCost, LayerShape, Method};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::{conv_depthwise, conv_rect, FeatureMap, Kernel4D};

/// Dense factor array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Factor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "factor shape {shape:?} holds {n} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let rows = self.shape[0];
        Matrix::from_vec(rows, self.data.len() / rows.max(1), self.data.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    #[inline]
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }
}

/// Which spatial axis the first spatial-SVD layer convolves along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialOrder {
    /// First factor spans `x` (a `k × 1` window in `(x, y)`), second spans `y`.
    HorizontalFirst,
    /// First factor spans `y`, second spans `x`.
    VerticalFirst,
}

impl SpatialOrder {
    pub fn name(self) -> &'static str {
        match self {
            SpatialOrder::HorizontalFirst => "horizontal-first",
            SpatialOrder::VerticalFirst => "vertical-first",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "horizontal-first" => Ok(SpatialOrder::HorizontalFirst),
            "vertical-first" => Ok(SpatialOrder::VerticalFirst),
            _ => Err(Error::InvalidArgument(format!("unknown spatial order '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factors {
    WeightSvd {
        first: Factor,
        second: Factor,
    },
    SpatialSvd {
        first: Factor,
        second: Factor,
        order: SpatialOrder,
    },
    Cp {
        input: Factor,
        vertical: Factor,
        horizontal: Factor,
        output: Factor,
    },
    Tucker {
        input: Factor,
        core: Factor,
        output: Factor,
    },
    Tt {
        first: Factor,
        second: Factor,
        third: Factor,
        fourth: Factor,
    },
    Asym3d {
        first: Factor,
        second: Factor,
        pointwise: Factor,
    },
}

impl Factors {
    pub fn method(&self) -> Method {
        match self {
            Factors::WeightSvd { .. } => Method::WeightSvd,
            Factors::SpatialSvd { .. } => Method::SpatialSvd,
            Factors::Cp { .. } => Method::Cp,
            Factors::Tucker { .. } => Method::Tucker,
            Factors::Tt { .. } => Method::Tt,
            Factors::Asym3d { .. } => Method::Asym3d,
        }
    }

    /// Factors with stable names, in storage order.
    pub fn named(&self) -> Vec<(&'static str, &Factor)> {
        match self {
            Factors::WeightSvd { first, second } => vec![("first", first), ("second", second)],
            Factors::SpatialSvd { first, second, .. } => vec![("first", first), ("second", second)],
            Factors::Cp {
                input,
                vertical,
                horizontal,
                output,
            } => vec![
                ("input", input),
                ("vertical", vertical),
                ("horizontal", horizontal),
                ("output", output),
            ],
            Factors::Tucker { input, core, output } => {
                vec![("input", input), ("core", core), ("output", output)]
            }
            Factors::Tt {
                first,
                second,
                third,
                fourth,
            } => vec![("first", first), ("second", second), ("third", third), ("fourth", fourth)],
            Factors::Asym3d {
                first,
                second,
                pointwise,
            } => vec![("first", first), ("second", second), ("pointwise", pointwise)],
        }
    }
}

/// A kernel replaced by a chain of smaller layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedLayer {
    pub factors: Factors,
    pub ranks: Vec<usize>,
    /// `(t, s, k)` of the source kernel.
    pub source_dims: (usize, usize, usize),
    /// Added to the final stage's output.
    pub bias: Option<Vec<f64>>,
    /// Provenance of the factorization (solver settings, fit, tails).
    pub metadata: BTreeMap<String, String>,
}

impl DecomposedLayer {
    /// Builds a layer and checks every factor shape against `ranks`.
    pub fn new(
        factors: Factors,
        ranks: Vec<usize>,
        source_dims: (usize, usize, usize),
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let layer = Self {
            factors,
            ranks,
            source_dims,
            bias,
            metadata: BTreeMap::new(),
        };
        layer.check_shapes()?;
        Ok(layer)
    }

    pub fn method(&self) -> Method {
        self.factors.method()
    }

    fn expected_shapes(&self) -> Vec<Vec<usize>> {
        let (t, s, k) = self.source_dims;
        let r = &self.ranks;
        match self.method() {
            Method::WeightSvd => vec![vec![k * k * s, r[0]], vec![r[0], t]],
            Method::SpatialSvd => vec![vec![s, k, r[0]], vec![r[0], t, k]],
            Method::Cp => vec![vec![s, r[0]], vec![k, r[0]], vec![k, r[0]], vec![t, r[0]]],
            Method::Tucker => vec![vec![s, r[0]], vec![k, k, r[0], r[1]], vec![t, r[1]]],
            Method::Tt => vec![
                vec![s, r[0]],
                vec![r[0], k, r[1]],
                vec![r[1], k, r[2]],
                vec![r[2], t],
            ],
            Method::Asym3d => vec![vec![s, k, r[0]], vec![r[0], r[1], k], vec![t, r[1]]],
            Method::Original => unreachable!("original is not a factorization"),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let method = self.method();
        if self.ranks.len() != method.rank_arity() {
            return Err(Error::RankArity {
                method: method.name(),
                expected: method.rank_arity(),
                got: self.ranks.len(),
            });
        }
        let expected = self.expected_shapes();
        for ((name, f), want) in self.factors.named().into_iter().zip(expected) {
            if f.shape() != want.as_slice() {
                return Err(Error::Shape(format!(
                    "{} factor '{name}' has shape {:?}, expected {want:?}",
                    method.name(),
                    f.shape()
                )));
            }
        }
        if let Some(b) = &self.bias {
            if b.len() != self.source_dims.0 {
                return Err(Error::Shape(format!("bias length {} != t", b.len())));
            }
        }
        Ok(())
    }

    /// Number of stored factor entries.
    pub fn param_count(&self) -> usize {
        self.factors.named().iter().map(|(_, f)| f.len()).sum()
    }

    pub fn cost(&self, h: usize, w: usize) -> Result<LayerCost> {
        let (t, s, k) = self.source_dims;
        cost::mac_cost(LayerShape::new(s, t, k, h, w), self.method(), &self.ranks)
    }

    pub fn reconstruct(&self) -> Kernel4D {
        reconstruct(self)
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        decomposed_forward(self, input)
    }
}

/// Evaluates the factorization's defining sum into a full kernel (the
/// layer bias, if any, is carried over).
pub fn reconstruct(layer: &DecomposedLayer) -> Kernel4D {
    let (t, s, k) = layer.source_dims;
    let r = &layer.ranks;
    let kernel = match &layer.factors {
        Factors::WeightSvd { first, second } => {
            let m = first.to_matrix().matmul(&second.to_matrix());
            crate::tensor::unmatricize_weight(&m, t, s, k)
        }
        Factors::SpatialSvd { first, second, order } => Kernel4D::from_fn(t, s, k, |o, i, x, y| {
            let (a, b) = match order {
                SpatialOrder::HorizontalFirst => (x, y),
                SpatialOrder::VerticalFirst => (y, x),
            };
            (0..r[0]).map(|c| first.at(&[i, a, c]) * second.at(&[c, o, b])).sum()
        }),
        Factors::Cp {
            input,
            vertical,
            horizontal,
            output,
        } => Kernel4D::from_fn(t, s, k, |o, i, x, y| {
            (0..r[0])
                .map(|c| input.at(&[i, c]) * vertical.at(&[y, c]) * horizontal.at(&[x, c]) * output.at(&[o, c]))
                .sum()
        }),
        Factors::Tucker { input, core, output } => {
            // Contract the output factor first: H(x, y, r1, o).
            let (r1, r2) = (r[0], r[1]);
            let mut partial = vec![0.0; k * k * r1 * t];
            for x in 0..k {
                for y in 0..k {
                    for a in 0..r1 {
                        for o in 0..t {
                            partial[((x * k + y) * r1 + a) * t + o] =
                                (0..r2).map(|b| core.at(&[x, y, a, b]) * output.at(&[o, b])).sum();
                        }
                    }
                }
            }
            Kernel4D::from_fn(t, s, k, |o, i, x, y| {
                (0..r1)
                    .map(|a| input.at(&[i, a]) * partial[((x * k + y) * r1 + a) * t + o])
                    .sum()
            })
        }
        Factors::Tt {
            first,
            second,
            third,
            fourth,
        } => {
            let (r1, r2, r3) = (r[0], r[1], r[2]);
            // Right part R(r2, y, o) = Σ_r3 third(r2, y, r3) fourth(r3, o).
            let mut right = vec![0.0; r2 * k * t];
            for b in 0..r2 {
                for y in 0..k {
                    for o in 0..t {
                        right[(b * k + y) * t + o] = (0..r3).map(|c| third.at(&[b, y, c]) * fourth.at(&[c, o])).sum();
                    }
                }
            }
            // Left part L(i, x, r2) = Σ_r1 first(i, r1) second(r1, x, r2).
            let mut left = vec![0.0; s * k * r2];
            for i in 0..s {
                for x in 0..k {
                    for b in 0..r2 {
                        left[(i * k + x) * r2 + b] = (0..r1).map(|a| first.at(&[i, a]) * second.at(&[a, x, b])).sum();
                    }
                }
            }
            Kernel4D::from_fn(t, s, k, |o, i, x, y| {
                (0..r2)
                    .map(|b| left[(i * k + x) * r2 + b] * right[(b * k + y) * t + o])
                    .sum()
            })
        }
        Factors::Asym3d {
            first,
            second,
            pointwise,
        } => {
            let (rs, rd) = (r[0], r[1]);
            // M(rs, y, o) = Σ_rd second(rs, rd, y) pointwise(o, rd)
            let mut tail = vec![0.0; rs * k * t];
            for a in 0..rs {
                for y in 0..k {
                    for o in 0..t {
                        tail[(a * k + y) * t + o] = (0..rd).map(|b| second.at(&[a, b, y]) * pointwise.at(&[o, b])).sum();
                    }
                }
            }
            Kernel4D::from_fn(t, s, k, |o, i, x, y| {
                (0..rs).map(|a| first.at(&[i, x, a]) * tail[(a * k + y) * t + o]).sum()
            })
        }
    }
    .expect("factor shapes validated at construction");
    let mut kernel = kernel;
    kernel.bias = layer.bias.clone();
    kernel
}

/// Runs the factorized layer as its chain of smaller convolutions.
pub fn decomposed_forward(layer: &DecomposedLayer, input: &FeatureMap) -> Result<FeatureMap> {
    let (t, s, k) = layer.source_dims;
    if input.channels() != s {
        return Err(Error::Shape(format!(
            "input has {} channels, layer expects {s}",
            input.channels()
        )));
    }
    let r = &layer.ranks;
    let mut out = match &layer.factors {
        Factors::WeightSvd { first, second } => {
            // k×k conv s → r, then 1×1 conv r → t
            let w1 = stage_weights(r[0], s, k, k, |c, i, x, y| first.at(&[(x * k + y) * s + i, c]));
            let x1 = conv_rect(&w1, r[0], s, k, k, input);
            let w2 = stage_weights(t, r[0], 1, 1, |o, c, _, _| second.at(&[c, o]));
            conv_rect(&w2, t, r[0], 1, 1, &x1)
        }
        Factors::SpatialSvd { first, second, order } => {
            let (kh1, kw1, kh2, kw2) = match order {
                SpatialOrder::HorizontalFirst => (k, 1, 1, k),
                SpatialOrder::VerticalFirst => (1, k, k, 1),
            };
            let w1 = stage_weights(r[0], s, kh1, kw1, |c, i, x, y| first.at(&[i, x.max(y), c]));
            let x1 = conv_rect(&w1, r[0], s, kh1, kw1, input);
            let w2 = stage_weights(t, r[0], kh2, kw2, |o, c, x, y| second.at(&[c, o, x.max(y)]));
            conv_rect(&w2, t, r[0], kh2, kw2, &x1)
        }
        Factors::Cp {
            input: fin,
            vertical,
            horizontal,
            output,
        } => {
            let rank = r[0];
            let w1 = stage_weights(rank, s, 1, 1, |c, i, _, _| fin.at(&[i, c]));
            let x1 = conv_rect(&w1, rank, s, 1, 1, input);
            // depthwise along y, then along x
            let wy: Vec<f64> = (0..rank).flat_map(|c| (0..k).map(move |y| (c, y))).map(|(c, y)| vertical.at(&[y, c])).collect();
            let x2 = conv_depthwise(&wy, 1, k, &x1);
            let wx: Vec<f64> = (0..rank).flat_map(|c| (0..k).map(move |x| (c, x))).map(|(c, x)| horizontal.at(&[x, c])).collect();
            let x3 = conv_depthwise(&wx, k, 1, &x2);
            let w4 = stage_weights(t, rank, 1, 1, |o, c, _, _| output.at(&[o, c]));
            conv_rect(&w4, t, rank, 1, 1, &x3)
        }
        Factors::Tucker {
            input: fin,
            core,
            output,
        } => {
            let (r1, r2) = (r[0], r[1]);
            let w1 = stage_weights(r1, s, 1, 1, |a, i, _, _| fin.at(&[i, a]));
            let x1 = conv_rect(&w1, r1, s, 1, 1, input);
            let w2 = stage_weights(r2, r1, k, k, |b, a, x, y| core.at(&[x, y, a, b]));
            let x2 = conv_rect(&w2, r2, r1, k, k, &x1);
            let w3 = stage_weights(t, r2, 1, 1, |o, b, _, _| output.at(&[o, b]));
            conv_rect(&w3, t, r2, 1, 1, &x2)
        }
        Factors::Tt {
            first,
            second,
            third,
            fourth,
        } => {
            let (r1, r2, r3) = (r[0], r[1], r[2]);
            let w1 = stage_weights(r1, s, 1, 1, |a, i, _, _| first.at(&[i, a]));
            let x1 = conv_rect(&w1, r1, s, 1, 1, input);
            let w2 = stage_weights(r2, r1, k, 1, |b, a, x, _| second.at(&[a, x, b]));
            let x2 = conv_rect(&w2, r2, r1, k, 1, &x1);
            let w3 = stage_weights(r3, r2, 1, k, |c, b, _, y| third.at(&[b, y, c]));
            let x3 = conv_rect(&w3, r3, r2, 1, k, &x2);
            let w4 = stage_weights(t, r3, 1, 1, |o, c, _, _| fourth.at(&[c, o]));
            conv_rect(&w4, t, r3, 1, 1, &x3)
        }
        Factors::Asym3d {
            first,
            second,
            pointwise,
        } => {
            let (rs, rd) = (r[0], r[1]);
            let w1 = stage_weights(rs, s, k, 1, |a, i, x, _| first.at(&[i, x, a]));
            let x1 = conv_rect(&w1, rs, s, k, 1, input);
            let w2 = stage_weights(rd, rs, 1, k, |b, a, _, y| second.at(&[a, b, y]));
            let x2 = conv_rect(&w2, rd, rs, 1, k, &x1);
            let w3 = stage_weights(t, rd, 1, 1, |o, b, _, _| pointwise.at(&[o, b]));
            conv_rect(&w3, t, rd, 1, 1, &x2)
        }
    };
    if let Some(b) = &layer.bias {
        out.add_bias(b);
    }
    Ok(out)
}

fn stage_weights(
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    f: impl Fn(usize, usize, usize, usize) -> f64,
) -> Vec<f64> {
    let mut w = Vec::with_capacity(out_ch * in_ch * kh * kw);
    for o in 0..out_ch {
        for i in 0..in_ch {
            for x in 0..kh {
                for y in 0..kw {
                    w.push(f(o, i, x, y));
                }
            }
        }
    }
    w
}
