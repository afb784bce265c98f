//! Pinhole projection into voxel coordinates, calibration noise and the
//! learnable camera-offset predictors.

mod camera;
mod offsets;

pub use camera::{
    perturb, project, project_backward, CameraPerturbation, Projected, ProjectionMatrix,
    VoxelGridSpec, MAX_CONDITION,
};
pub use offsets::{
    predict_global_offset, predict_pixel_offsets, CameraOffsetParams, GlobalOffset, OffsetScales,
    PixelOffsets,
};
