use serde::{Deserialize, Serialize};

use crate::diffcore::SeededRng;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAX_CONDITION: f64 = 1e8;

/// 3×4 map from homogeneous camera rays `[u·d, v·d, d, 1]` to world points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct ProjectionMatrix<T> {
    entries: [[T; 4]; 3],
}

fn det3<T: Real>(a: &[[T; 3]; 3]) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

impl<T: Real> ProjectionMatrix<T> {
    /// Validated constructor: finite entries and a well-conditioned 3×3 block.
    pub fn new(entries: [[T; 4]; 3]) -> Result<Self> {
        let p = ProjectionMatrix { entries };
        p.validate()?;
        Ok(p)
    }

    /// No validation; used for intermediate matrices such as `P + ΔP`.
    pub fn from_entries_unchecked(entries: [[T; 4]; 3]) -> Self {
        ProjectionMatrix { entries }
    }

    pub fn identity() -> Self {
        let mut e = [[T::zero(); 4]; 3];
        for (i, row) in e.iter_mut().enumerate() {
            row[i] = T::one();
        }
        ProjectionMatrix { entries: e }
    }

    pub fn entries(&self) -> &[[T; 4]; 3] {
        &self.entries
    }

    pub fn flat(&self) -> [T; 12] {
        let mut out = [T::zero(); 12];
        for (i, row) in self.entries.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(row);
        }
        out
    }

    pub fn from_flat_unchecked(flat: &[T]) -> Self {
        let mut e = [[T::zero(); 4]; 3];
        for (i, row) in e.iter_mut().enumerate() {
            row.copy_from_slice(&flat[i * 4..i * 4 + 4]);
        }
        ProjectionMatrix { entries: e }
    }

    pub fn plus(&self, delta: &[[T; 4]; 3]) -> Self {
        let mut e = self.entries;
        for (row, drow) in e.iter_mut().zip(delta) {
            for (x, &dx) in row.iter_mut().zip(drow) {
                *x += dx;
            }
        }
        ProjectionMatrix { entries: e }
    }

    pub fn block(&self) -> [[T; 3]; 3] {
        let mut b = [[T::zero(); 3]; 3];
        for i in 0..3 {
            b[i].copy_from_slice(&self.entries[i][..3]);
        }
        b
    }

    /// Frobenius condition number of the 3×3 block (∞ when singular).
    pub fn condition_number(&self) -> T {
        let a = self.block();
        let det = det3(&a);
        if det == T::zero() || !det.is_finite() {
            return T::infinity();
        }
        let mut inv_sq = T::zero();
        let mut a_sq = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                a_sq += a[i][j] * a[i][j];
                // cofactor C_ji / det gives inverse entry (i, j)
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                let cof = a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
                let inv = cof / det;
                inv_sq += inv * inv;
            }
        }
        (a_sq * inv_sq).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("projection matrix has non-finite entries".into()));
        }
        let cond = self.condition_number();
        if !(cond < T::lit(MAX_CONDITION)) {
            return Err(Error::Precondition(format!("projection block ill-conditioned (cond {cond})")));
        }
        Ok(())
    }

    /// World point of the ray `(u, v)` at depth `d`.
    pub fn apply(&self, homog: &[T; 4]) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for (o, row) in out.iter_mut().zip(&self.entries) {
            *o = row[0] * homog[0] + row[1] * homog[1] + row[2] * homog[2] + row[3] * homog[3];
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ProjectionMatrix<U> {
        let mut e = [[U::zero(); 4]; 3];
        for (row, src) in e.iter_mut().zip(&self.entries) {
            for (x, &s) in row.iter_mut().zip(src) {
                *x = U::lit(s.to_f64_lossy());
            }
        }
        ProjectionMatrix { entries: e }
    }
}

/// Regular voxel grid; continuous index `i` is the centre of voxel `i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct VoxelGridSpec<T> {
    pub extent: [usize; 3],
    pub origin: [T; 3],
    pub voxel_size: [T; 3],
}

impl<T: Real> VoxelGridSpec<T> {
    pub fn new(extent: [usize; 3], origin: [T; 3], voxel_size: [T; 3]) -> Result<Self> {
        if extent.iter().any(|&e| e == 0) {
            return Err(Error::config(format!("grid extent {extent:?} has a zero axis")));
        }
        if voxel_size.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(Error::config("voxel size must be positive and finite"));
        }
        Ok(VoxelGridSpec { extent, origin, voxel_size })
    }

    /// Unit voxels with voxel 0 centred at the world origin.
    pub fn unit(extent: [usize; 3]) -> Self {
        VoxelGridSpec { extent, origin: [T::zero(); 3], voxel_size: [T::one(); 3] }
    }

    pub fn voxels(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn world_to_index(&self, p: &[T; 3]) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for a in 0..3 {
            out[a] = (p[a] - self.origin[a]) / self.voxel_size[a];
        }
        out
    }

    pub fn index_to_world(&self, x: &[T; 3]) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for a in 0..3 {
            out[a] = x[a] * self.voxel_size[a] + self.origin[a];
        }
        out
    }

    /// Flat index of an integer voxel, or `None` outside the grid.
    pub fn flat(&self, idx: [i64; 3]) -> Option<usize> {
        let [h, w, z] = self.extent;
        if idx[0] < 0 || idx[1] < 0 || idx[2] < 0 {
            return None;
        }
        let (a, b, c) = (idx[0] as usize, idx[1] as usize, idx[2] as usize);
        if a >= h || b >= w || c >= z {
            return None;
        }
        Some((a * w + b) * z + c)
    }

    pub fn unflat(&self, flat: usize) -> [usize; 3] {
        let [_, w, z] = self.extent;
        [flat / (w * z), (flat / z) % w, flat % z]
    }

    /// Voxel containing a continuous index point (round half up per axis).
    pub fn nearest(&self, x: &[T; 3]) -> [i64; 3] {
        let half = T::lit(0.5);
        let mut out = [0i64; 3];
        for a in 0..3 {
            out[a] = (x[a] + half).floor().to_i64().unwrap_or(i64::MIN);
        }
        out
    }

    /// Inside the `[−1, extent]` band where splatting can still reach the grid.
    pub fn in_band(&self, x: &[T; 3]) -> bool {
        (0..3).all(|a| x[a] >= -T::one() && x[a] <= T::from_usize_lossy(self.extent[a]))
    }

    pub fn cast<U: Real>(&self) -> VoxelGridSpec<U> {
        VoxelGridSpec {
            extent: self.extent,
            origin: self.origin.map(|x| U::lit(x.to_f64_lossy())),
            voxel_size: self.voxel_size.map(|x| U::lit(x.to_f64_lossy())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected<T> {
    /// Continuous voxel-index coordinates `(h, w, z)`.
    pub coord: [T; 3],
    /// Homogeneous ray vector `[u·d, v·d, d, 1]`.
    pub homog: [T; 4],
    pub in_frustum: bool,
}

/// Maps image position `(u, v)` at depth `d` to continuous voxel coordinates.
pub fn project<T: Real>(
    p: &ProjectionMatrix<T>,
    u: T,
    v: T,
    d: T,
    spec: &VoxelGridSpec<T>,
) -> Result<Projected<T>> {
    if !(d > T::zero()) || !d.is_finite() {
        return Err(Error::Precondition(format!("depth must be positive and finite, got {d}")));
    }
    let homog = [u * d, v * d, d, T::one()];
    let coord = spec.world_to_index(&p.apply(&homog));
    Ok(Projected { coord, homog, in_frustum: spec.in_band(&coord) })
}

/// Gradients of a loss w.r.t. `P`, `u`, `v`, `d` given `∂L/∂coord`.
pub fn project_backward<T: Real>(
    p: &ProjectionMatrix<T>,
    u: T,
    v: T,
    d: T,
    spec: &VoxelGridSpec<T>,
    dcoord: &[T; 3],
) -> ([[T; 4]; 3], T, T, T) {
    let homog = [u * d, v * d, d, T::one()];
    let mut dp = [[T::zero(); 4]; 3];
    let mut dh = [T::zero(); 4];
    for i in 0..3 {
        let dy = dcoord[i] / spec.voxel_size[i];
        for j in 0..4 {
            dp[i][j] = dy * homog[j];
            dh[j] += p.entries[i][j] * dy;
        }
    }
    (dp, dh[0] * d, dh[1] * d, dh[0] * u + dh[1] * v + dh[2])
}

/// Additive Gaussian noise on every entry of `P` (calibration error `e_P`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPerturbation {
    pub sigma: f64,
    pub seed: u64,
}

const PERTURB_TRIES: usize = 10;

/// `P + N(0, σ²)` per entry. `σ = 0` returns `P` untouched; ill-conditioned
/// draws are resampled up to ten times.
pub fn perturb<T: Real>(p: &ProjectionMatrix<T>, pert: &CameraPerturbation) -> Result<ProjectionMatrix<T>> {
    if !(pert.sigma >= 0.0) || !pert.sigma.is_finite() {
        return Err(Error::Precondition(format!("noise sigma must be ≥ 0, got {}", pert.sigma)));
    }
    if pert.sigma == 0.0 {
        return Ok(*p);
    }
    let mut rng = SeededRng::new(pert.seed);
    for _ in 0..PERTURB_TRIES {
        let mut e = p.entries;
        for x in e.iter_mut().flatten() {
            *x += T::lit(pert.sigma * rng.normal());
        }
        let candidate = ProjectionMatrix { entries: e };
        if candidate.validate().is_ok() {
            return Ok(candidate);
        }
    }
    Err(Error::Numerical(format!(
        "no well-conditioned perturbation after {PERTURB_TRIES} draws (sigma {})",
        pert.sigma
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_p(rng: &mut SeededRng) -> ProjectionMatrix<f64> {
        let mut e = [[0.0; 4]; 3];
        for (i, row) in e.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = rng.normal() * 0.3 + if i == j { 1.0 } else { 0.0 };
            }
        }
        ProjectionMatrix::new(e).unwrap()
    }

    #[test]
    fn identity_projection() {
        let spec = VoxelGridSpec::unit([20, 20, 20]);
        let out = project(&ProjectionMatrix::identity(), 2.0, 3.0, 5.0, &spec).unwrap();
        assert_eq!(out.coord, [10.0, 15.0, 5.0]);
        assert!(out.in_frustum);
        assert!(project(&ProjectionMatrix::identity(), 2.0, 3.0, 0.0, &spec).is_err());
        let far = project(&ProjectionMatrix::identity(), 30.0, 3.0, 1.0, &spec).unwrap();
        assert!(!far.in_frustum);
    }

    #[test]
    fn matches_homogeneous_multiply() {
        let mut rng = SeededRng::new(9);
        let spec = VoxelGridSpec::new([6, 6, 6], [0.5, -1.0, 2.0], [0.5, 2.0, 1.5]).unwrap();
        for _ in 0..50 {
            let p = random_p(&mut rng);
            let (u, v, d) = (rng.normal() * 3.0, rng.normal() * 3.0, rng.uniform_range(0.5, 9.0));
            // 4×4: [P; 0 0 0 1] times [u d, v d, d, 1], then the index affine map
            let mut m = [[0.0; 4]; 4];
            m[..3].copy_from_slice(p.entries());
            m[3][3] = 1.0;
            let x = [u * d, v * d, d, 1.0];
            let mut y = [0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    y[i] += m[i][j] * x[j];
                }
            }
            let got = project(&p, u, v, d, &spec).unwrap().coord;
            for a in 0..3 {
                let want = (y[a] / y[3] - spec.origin[a]) / spec.voxel_size[a];
                assert!((got[a] - want).abs() <= 1e-12 * want.abs().max(1.0), "{got:?} vs {want}");
            }
        }
    }

    #[test]
    fn projection_backward_matches_differences() {
        let mut rng = SeededRng::new(4);
        let spec = VoxelGridSpec::new([6, 6, 6], [0.0; 3], [0.7, 1.0, 1.3]).unwrap();
        let p = random_p(&mut rng);
        let (u, v, d) = (0.7, -1.2, 3.4);
        let w = [0.3, -0.8, 1.1];
        let f = |p: &ProjectionMatrix<f64>, u: f64, v: f64, d: f64| {
            let c = project(p, u, v, d, &spec).unwrap().coord;
            c[0] * w[0] + c[1] * w[1] + c[2] * w[2]
        };
        let (dp, du, dv, dd) = project_backward(&p, u, v, d, &spec, &w);
        let h = 1e-6;
        let fd = |a: f64, b: f64| (a - b) / (2.0 * h);
        assert!((du - fd(f(&p, u + h, v, d), f(&p, u - h, v, d))).abs() < 1e-8);
        assert!((dv - fd(f(&p, u, v + h, d), f(&p, u, v - h, d))).abs() < 1e-8);
        assert!((dd - fd(f(&p, u, v, d + h), f(&p, u, v, d - h))).abs() < 1e-8);
        for i in 0..3 {
            for j in 0..4 {
                let mut e = [[0.0; 4]; 3];
                e[i][j] = h;
                let plus = p.plus(&e);
                e[i][j] = -h;
                let minus = p.plus(&e);
                assert!((dp[i][j] - fd(f(&plus, u, v, d), f(&minus, u, v, d))).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn perturbation_contract() {
        let mut rng = SeededRng::new(2);
        let p = random_p(&mut rng);
        let same = perturb(&p, &CameraPerturbation { sigma: 0.0, seed: 5 }).unwrap();
        for (a, b) in same.flat().iter().zip(p.flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let pert = CameraPerturbation { sigma: 0.1, seed: 77 };
        let a = perturb(&p, &pert).unwrap();
        let b = perturb(&p, &pert).unwrap();
        assert_eq!(a, b);
        // regenerate from the seeded stream directly
        let mut noise = SeededRng::new(77);
        for (x, y) in a.flat().iter().zip(p.flat()) {
            assert_eq!(*x, y + 0.1 * noise.normal());
        }
        assert!(perturb(&p, &CameraPerturbation { sigma: -1.0, seed: 0 }).is_err());
    }

    #[test]
    fn perturbation_mean_converges() {
        let mut rng = SeededRng::new(8);
        let p = random_p(&mut rng);
        let sigma = 0.1;
        let n = 10_000;
        let mut mean = [0.0; 12];
        for s in 0..n {
            let q = perturb(&p, &CameraPerturbation { sigma, seed: s }).unwrap();
            for (m, x) in mean.iter_mut().zip(q.flat()) {
                *m += x / n as f64;
            }
        }
        for (m, x) in mean.iter().zip(p.flat()) {
            assert!((m - x).abs() <= 3.0 * sigma / 100.0, "{m} vs {x}");
        }
    }

    #[test]
    fn singular_block_rejected() {
        let e = [[1.0, 2.0, 3.0, 0.0], [2.0, 4.0, 6.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        assert!(ProjectionMatrix::new(e).is_err());
        assert!(ProjectionMatrix::<f64>::identity().condition_number() < 3.0 + 1e-12);
    }
}
