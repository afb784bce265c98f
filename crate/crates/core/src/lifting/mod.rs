//! 2D-to-3D lifting: per-pixel depth (or per-group depth) simplices, splat
//! plans that deposit weighted pixel features into voxels by nearest
//! rounding or trilinear soft filling, and the semantic oracle geometry.

mod oracle;
mod splat;
mod weights;

pub use oracle::{oracle_class_mass, scl_oracle_geometry};
pub use splat::{
    lift_nearest, lift_soft, trilinear_weights, Neighbor, SplatGrads, SplatMode, SplatPlan, ViewGeometry,
};
pub use weights::{
    predict_group_weights, DepthBins, GeometryVolume, GroupWeights, LiftHeadCache, LiftHeadParams,
    SIMPLEX_TOL,
};
