//! Differentiable semantic-causality-aware 2D-to-3D feature lifting.
//!
//! The crate is organised along the causal chain image features → geometry
//! → lifted voxel features → occupancy:
//!
//! * [`diffcore`]: dense arrays, parameter storage, seeded RNG and the
//!   finite-difference adjoint checker.
//! * [`geometry`]: projection matrices, voxel grids, camera perturbation and
//!   the two learnable camera-offset predictors.
//! * [`lifting`]: depth-simplex and channel-grouped lifting with nearest or
//!   trilinear (soft) splatting, plus the semantic oracle geometry.
//! * [`normconv`]: softmax-normalised depthwise-transposed and pointwise
//!   convolutions.
//! * [`causal`]: per-class influence maps, attention maps and the causal BCE.
//! * [`occhead`]: per-voxel decoder, cross-entropy and IoU metrics.
//! * [`scene`]: synthetic blocky worlds, ray-cast views and scene bundles.
//! * [`pipeline`]: the full model with forward and hand-derived backward.
//!
//! All numerical code is generic over [`Real`]; the aliases below fix the
//! scalar to `f64`, which is what the training harness uses.

pub mod causal;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod lifting;
pub mod normconv;
pub mod occhead;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod scene;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid = diffcore::DenseGrid<f64>;
pub type Grid32 = diffcore::DenseGrid<f32>;
pub type Params = diffcore::ParamStore<f64>;
pub type Projection = geometry::ProjectionMatrix<f64>;
pub type GridSpec = geometry::VoxelGridSpec<f64>;
pub type Model = pipeline::ScatModel<f64>;
