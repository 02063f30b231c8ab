//! Parameter and MAC counts for the original layer and every factorization.
//!
//! | method      | parameters                    | MACs (per output pixel × hw)          |
//! |-------------|-------------------------------|---------------------------------------|
//! | original    | k²st                          | k²st·hw                               |
//! | weight SVD  | (k²s + t)r                    | (k²s + t)r·hw                         |
//! | spatial SVD | (ks + kt)r                    | (ks + kt)r·hw                         |
//! | CP          | (2k + s + t)r                 | (s + 2k + t)r·hw                      |
//! | Tucker-2    | sr₁ + k²r₁r₂ + tr₂            | (sr₁ + k²r₁r₂ + tr₂)·hw               |
//! | TT          | sr₁ + kr₁r₂ + kr₂r₃ + r₃t     | (sr₁ + kr₁r₂ + kr₂r₃ + r₃t)·hw        |
//! | Asym3D      | ks·r_s + k·r_s·r_d + r_d·t    | (ks·r_s + k·r_s·r_d + r_d·t)·hw       |

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Original,
    WeightSvd,
    SpatialSvd,
    Cp,
    Tucker,
    Tt,
    /// Spatial SVD followed by a data-optimized split of the second factor.
    Asym3d,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Original,
        Method::WeightSvd,
        Method::SpatialSvd,
        Method::Cp,
        Method::Tucker,
        Method::Tt,
        Method::Asym3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::WeightSvd => "weight-svd",
            Method::SpatialSvd => "spatial-svd",
            Method::Cp => "cp",
            Method::Tucker => "tucker",
            Method::Tt => "tt",
            Method::Asym3d => "asym3d",
        }
    }

    /// Number of rank parameters the method takes.
    pub fn rank_arity(self) -> usize {
        match self {
            Method::Original => 0,
            Method::WeightSvd | Method::SpatialSvd | Method::Cp => 1,
            Method::Tucker | Method::Asym3d => 2,
            Method::Tt => 3,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

/// Geometry of one convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub s: usize,
    pub t: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl LayerShape {
    pub fn new(s: usize, t: usize, k: usize, h: usize, w: usize) -> Self {
        Self { s, t, k, h, w }
    }

    pub fn original_macs(&self) -> u64 {
        (self.k * self.k * self.s * self.t) as u64 * (self.h * self.w) as u64
    }
}

/// Upper bound of every rank component, or `None` for CP (unbounded).
pub fn max_ranks(method: Method, s: usize, t: usize, k: usize) -> Option<Vec<usize>> {
    match method {
        Method::Original => Some(vec![]),
        Method::WeightSvd => Some(vec![(k * k * s).min(t)]),
        Method::SpatialSvd => Some(vec![(s * k).min(t * k)]),
        Method::Cp => None,
        Method::Tucker => Some(vec![s, t]),
        Method::Tt => Some(vec![s, (s * k).min(k * t), t]),
        Method::Asym3d => Some(vec![(s * k).min(t * k), t]),
    }
}

/// Checks arity and bounds of `ranks` for `method`.
pub fn validate_ranks(method: Method, s: usize, t: usize, k: usize, ranks: &[usize]) -> Result<()> {
    let arity = method.rank_arity();
    if ranks.len() != arity {
        return Err(Error::RankArity {
            method: method.name(),
            expected: arity,
            got: ranks.len(),
        });
    }
    let maxes = max_ranks(method, s, t, k);
    for (idx, &r) in ranks.iter().enumerate() {
        let max = maxes.as_ref().map_or(usize::MAX, |m| m[idx]);
        if r == 0 || r > max {
            return Err(Error::RankOutOfRange {
                what: method.name(),
                rank: r,
                max,
            });
        }
    }
    Ok(())
}

/// Cost of one layer under one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub method: Method,
    pub ranks: Vec<usize>,
    pub macs_original: u64,
    pub params_original: u64,
    pub macs_compressed: u64,
    pub params_compressed: u64,
    /// `1 − macs_compressed / macs_original`; negative when the
    /// factorization costs more than the original layer.
    pub ratio: f64,
}

/// Parameter count per the table in the module docs.
pub fn param_count(method: Method, s: usize, t: usize, k: usize, ranks: &[usize]) -> Result<u64> {
    validate_ranks(method, s, t, k, ranks)?;
    let (s, t, k) = (s as u64, t as u64, k as u64);
    let r: Vec<u64> = ranks.iter().map(|&r| r as u64).collect();
    Ok(match method {
        Method::Original => k * k * s * t,
        Method::WeightSvd => (k * k * s + t) * r[0],
        Method::SpatialSvd => (k * s + k * t) * r[0],
        Method::Cp => (2 * k + s + t) * r[0],
        Method::Tucker => s * r[0] + k * k * r[0] * r[1] + t * r[1],
        Method::Tt => s * r[0] + k * r[0] * r[1] + k * r[1] * r[2] + r[2] * t,
        Method::Asym3d => k * s * r[0] + k * r[0] * r[1] + r[1] * t,
    })
}

/// Evaluates the cost table for one layer.
pub fn mac_cost(shape: LayerShape, method: Method, ranks: &[usize]) -> Result<LayerCost> {
    let LayerShape { s, t, k, h, w } = shape;
    let params_compressed = param_count(method, s, t, k, ranks)?;
    // Every term of every method scales with the output plane.
    let macs_compressed = params_compressed * (h * w) as u64;
    let macs_original = shape.original_macs();
    let params_original = (k * k * s * t) as u64;
    let ratio = if macs_original == 0 {
        0.0
    } else {
        1.0 - macs_compressed as f64 / macs_original as f64
    };
    Ok(LayerCost {
        method,
        ranks: ranks.to_vec(),
        macs_original,
        params_original,
        macs_compressed,
        params_compressed,
        ratio,
    })
}

/// Whole-model ratio `α = 1 − Ĉ/C` over any set of layer costs.
pub fn model_ratio(costs: &[LayerCost]) -> f64 {
    let c: u64 = costs.iter().map(|c| c.macs_original).sum();
    let c_hat: u64 = costs.iter().map(|c| c.macs_compressed).sum();
    if c == 0 {
        0.0
    } else {
        1.0 - c_hat as f64 / c as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn original_3x3_64() {
        let c = mac_cost(LayerShape::new(64, 64, 3, 16, 16), Method::Original, &[]).unwrap();
        assert_eq!(c.macs_compressed, 9 * 64 * 64 * 256);
        assert_eq!(c.macs_compressed, 9_437_184);
        assert_eq!(c.ratio, 0.0);
    }

    #[test]
    fn cp_example() {
        let c = mac_cost(LayerShape::new(8, 8, 3, 4, 4), Method::Cp, &[16]).unwrap();
        assert_eq!(c.macs_compressed, (8 + 6 + 8) * 16 * 16);
        assert_eq!(c.macs_compressed, 5632);
    }

    #[test]
    fn full_rank_weight_svd_can_cost_more() {
        let shape = LayerShape::new(4, 4, 3, 5, 5);
        let r = max_ranks(Method::WeightSvd, 4, 4, 3).unwrap()[0];
        let c = mac_cost(shape, Method::WeightSvd, &[r]).unwrap();
        assert!(c.ratio < 0.0);
    }

    #[test]
    fn arity_and_bounds() {
        let shape = LayerShape::new(4, 6, 3, 2, 2);
        assert!(matches!(
            mac_cost(shape, Method::Tucker, &[2]),
            Err(Error::RankArity { expected: 2, got: 1, .. })
        ));
        assert!(matches!(mac_cost(shape, Method::Original, &[1]), Err(Error::RankArity { .. })));
        assert!(mac_cost(shape, Method::Tucker, &[5, 2]).is_err());
        assert!(mac_cost(shape, Method::Tucker, &[4, 6]).is_ok());
        assert!(mac_cost(shape, Method::WeightSvd, &[7]).is_err());
        assert!(mac_cost(shape, Method::SpatialSvd, &[13]).is_err());
        assert!(mac_cost(shape, Method::Tt, &[4, 12, 7]).is_err());
        assert!(mac_cost(shape, Method::Cp, &[0]).is_err());
        assert!(mac_cost(shape, Method::Cp, &[1000]).is_ok());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
