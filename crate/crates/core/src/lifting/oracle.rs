use crate::diffcore::DenseGrid;
use crate::error::{Error, Result};
use crate::geometry::{project, ProjectionMatrix, VoxelGridSpec};
use crate::lifting::{DepthBins, SplatPlan};
use crate::scalar::Real;

/// Semantic oracle geometry: `p_d = 1` exactly when the voxel hit by
/// `(u, v, d)` carries the pixel's own class, else 0. Not normalised.
///
/// `world` holds one class id per voxel (flat `h, w, z` order) and `labels`
/// one class id per pixel (`u, v` order).
pub fn scl_oracle_geometry<T: Real>(
    world: &[u8],
    labels: &[u8],
    image: (usize, usize),
    p: &ProjectionMatrix<T>,
    bins: &DepthBins<T>,
    spec: &VoxelGridSpec<T>,
) -> Result<DenseGrid<T>> {
    let (nu, nv) = image;
    if world.len() != spec.voxels() || labels.len() != nu * nv {
        return Err(Error::shape("oracle geometry: world or label image size mismatch"));
    }
    let nd = bins.count;
    let mut out = DenseGrid::zeros(&[nu, nv, nd]);
    let od = out.data_mut();
    for a in 0..nu {
        for b in 0..nv {
            let s = labels[a * nv + b];
            for k in 0..nd {
                let d = bins.depth(T::from_usize_lossy(k));
                let proj = project(p, T::from_usize_lossy(a), T::from_usize_lossy(b), d, spec)?;
                if let Some(voxel) = spec.flat(spec.nearest(&proj.coord)) {
                    if world[voxel] == s {
                        od[(a * nv + b) * nd + k] = T::one();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of each pixel's deposited mass that lands on voxels of the
/// pixel's own class, for pixels that deposit anything.
pub fn oracle_class_mass<T: Real>(plan: &SplatPlan<T>, weights: &DenseGrid<T>, world: &[u8], labels: &[u8]) -> Vec<T> {
    let (nu, nv) = plan.image();
    let nd = plan.depth_bins();
    let mut out = Vec::new();
    for a in 0..nu {
        for b in 0..nv {
            let s = labels[a * nv + b];
            let (mut total, mut hit) = (T::zero(), T::zero());
            for k in 0..nd {
                let p = weights.data()[(a * nv + b) * nd + k];
                for (voxel, w) in plan.taps_of(a, b, k) {
                    total += p * w;
                    if world[voxel] == s {
                        hit += p * w;
                    }
                }
            }
            if total > T::zero() {
                out.push(hit / total);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_empty_rows() {
        let spec = VoxelGridSpec::unit([6, 6, 6]);
        let bins = DepthBins::new(1.0, 4.0, 4).unwrap();
        let p = ProjectionMatrix::identity();
        let mut world = vec![0u8; 216];
        // pixel (1, 1) at depth 3 lands on voxel (3, 3, 3)
        world[spec.flat([3, 3, 3]).unwrap()] = 2;
        let mut labels = vec![0u8; 4];
        labels[3] = 2; // pixel (1, 1)
        labels[2] = 1; // pixel (1, 0): class 1 is nowhere in the world
        let g = scl_oracle_geometry(&world, &labels, (2, 2), &p, &bins, &spec).unwrap();
        assert_eq!(&g.data()[12..16], &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(&g.data()[8..12], &[0.0; 4]);
        // background pixel (0, 0) hits empty voxels at every depth
        assert_eq!(&g.data()[0..4], &[1.0; 4]);
    }
}
