//! Compression of 4-D convolution kernels: SVD and tensor factorizations,
//! data-optimized refinements, channel pruning, stochastic channel gates
//! and whole-model rank selection under a MAC budget.
//!
//! All arithmetic is `f64`; the on-disk [`container`] stores `f32`.

pub mod container;
pub mod cost;
pub mod data_opt;
pub mod decomp;
pub mod error;
pub mod gates;
pub mod linalg;
pub mod pruning;
pub mod rank_select;
pub mod tensor;

pub use cost::{mac_cost, LayerCost, LayerShape, Method};
pub use decomp::{DecomposedLayer, Factor, Factors, SpatialOrder};
pub use error::{Error, Result};
pub use tensor::{conv_direct, FeatureMap, Kernel4D};
