use serde::{Deserialize, Serialize};

use crate::diffcore::DenseGrid;
use crate::error::{Error, Result};
use crate::geometry::{project, project_backward, ProjectionMatrix, VoxelGridSpec};
use crate::lifting::{DepthBins, GroupWeights};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplatMode {
    /// Trilinear soft filling; differentiable in the coordinates.
    Soft,
    /// Round half up to one voxel; coordinates receive no gradient.
    Nearest,
}

/// One corner of the trilinear stencil.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<T> {
    pub index: [i64; 3],
    pub weight: T,
    /// `∂weight/∂coord`, taken in the floor cell at integer coordinates.
    pub grad: [T; 3],
    pub in_range: bool,
}

/// The eight trilinear corners of `coord`; weights sum to one before any
/// out-of-range corners are dropped.
pub fn trilinear_weights<T: Real>(coord: &[T; 3], spec: &VoxelGridSpec<T>) -> [Neighbor<T>; 8] {
    let mut base = [0i64; 3];
    let mut frac = [T::zero(); 3];
    for a in 0..3 {
        let f = coord[a].floor();
        base[a] = f.to_i64().unwrap_or(i64::MIN / 2);
        frac[a] = coord[a] - f;
    }
    let mut out = [Neighbor { index: [0; 3], weight: T::zero(), grad: [T::zero(); 3], in_range: false }; 8];
    for (corner, n) in out.iter_mut().enumerate() {
        let bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut phi = [T::zero(); 3];
        let mut dphi = [T::zero(); 3];
        for a in 0..3 {
            if bits[a] == 1 {
                phi[a] = frac[a];
                dphi[a] = T::one();
            } else {
                phi[a] = T::one() - frac[a];
                dphi[a] = -T::one();
            }
            n.index[a] = base[a] + bits[a] as i64;
        }
        n.weight = phi[0] * phi[1] * phi[2];
        n.grad = [dphi[0] * phi[1] * phi[2], phi[0] * dphi[1] * phi[2], phi[0] * phi[1] * dphi[2]];
        n.in_range = spec.flat(n.index).is_some();
    }
    out
}

/// Everything needed to lift one camera view.
#[derive(Clone, Debug)]
pub struct ViewGeometry<'a, T> {
    /// Effective projection (`P + ΔP` when a global offset is used).
    pub projection: ProjectionMatrix<T>,
    /// Optional `U×V×D×3` offsets (Δu, Δv in pixels, Δd in bins).
    pub pixel_offsets: Option<&'a DenseGrid<T>>,
    pub bins: DepthBins<T>,
    pub spec: VoxelGridSpec<T>,
    pub image: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    voxel: usize,
    weight: T,
    dweight: [T; 3],
}

/// Precomputed stencils for every `(u, v, d)` hypothesis of a view.
///
/// Lifting is the bilinear form `B(f, V) = Σ ω · w · f(u,v,c) · V(tap, c)`;
/// depositing is `∂B/∂V`, gathering is `∂B/∂f`, and
/// [`SplatPlan::bilinear_grads`] differentiates `B` in `ω` and coordinates.
#[derive(Clone, Debug)]
pub struct SplatPlan<T> {
    mode: SplatMode,
    image: (usize, usize),
    depth: usize,
    projection: ProjectionMatrix<T>,
    spec: VoxelGridSpec<T>,
    bins: DepthBins<T>,
    has_offsets: bool,
    points: Vec<[T; 3]>,
    starts: Vec<usize>,
    taps: Vec<Tap<T>>,
}

/// Gradients of the lifting bilinear form.
#[derive(Clone, Debug)]
pub struct SplatGrads<T> {
    /// `U×V×G×D`
    pub weights: DenseGrid<T>,
    /// `∂/∂coord` per hypothesis, `(u·V + v)·D + d` order.
    pub coords: Vec<[T; 3]>,
}

impl<T: Real> SplatPlan<T> {
    pub fn build(geom: &ViewGeometry<'_, T>, mode: SplatMode) -> Result<Self> {
        let (nu, nv) = geom.image;
        let nd = geom.bins.count;
        if let Some(off) = geom.pixel_offsets {
            off.expect_shape(&[nu, nv, nd, 3], "pixel offsets")?;
        }
        let n = nu * nv * nd;
        let mut points = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n + 1);
        let mut taps = Vec::with_capacity(n * if mode == SplatMode::Soft { 8 } else { 1 });
        let zero3 = [T::zero(); 3];
        for a in 0..nu {
            for b in 0..nv {
                for k in 0..nd {
                    starts.push(taps.len());
                    let h = (a * nv + b) * nd + k;
                    let (du, dv, dd) = match geom.pixel_offsets {
                        Some(off) => {
                            let o = &off.data()[h * 3..h * 3 + 3];
                            (o[0], o[1], o[2])
                        }
                        None => (T::zero(), T::zero(), T::zero()),
                    };
                    let u = T::from_usize_lossy(a) + du;
                    let v = T::from_usize_lossy(b) + dv;
                    let d = geom.bins.depth(T::from_usize_lossy(k) + dd);
                    points.push([u, v, d]);
                    if !(d > T::zero()) {
                        continue;
                    }
                    let proj = project(&geom.projection, u, v, d, &geom.spec)?;
                    if !proj.in_frustum {
                        continue;
                    }
                    match mode {
                        SplatMode::Soft => {
                            for nb in trilinear_weights(&proj.coord, &geom.spec) {
                                if let Some(voxel) = geom.spec.flat(nb.index) {
                                    taps.push(Tap { voxel, weight: nb.weight, dweight: nb.grad });
                                }
                            }
                        }
                        SplatMode::Nearest => {
                            if let Some(voxel) = geom.spec.flat(geom.spec.nearest(&proj.coord)) {
                                taps.push(Tap { voxel, weight: T::one(), dweight: zero3 });
                            }
                        }
                    }
                }
            }
        }
        starts.push(taps.len());
        Ok(SplatPlan {
            mode,
            image: geom.image,
            depth: nd,
            projection: geom.projection,
            spec: geom.spec,
            bins: geom.bins,
            has_offsets: geom.pixel_offsets.is_some(),
            points,
            starts,
            taps,
        })
    }

    pub fn mode(&self) -> SplatMode {
        self.mode
    }

    pub fn image(&self) -> (usize, usize) {
        self.image
    }

    pub fn depth_bins(&self) -> usize {
        self.depth
    }

    pub fn spec(&self) -> &VoxelGridSpec<T> {
        &self.spec
    }

    /// Voxels (with weights) reached by hypothesis `(u, v, d)`.
    pub fn taps_of(&self, u: usize, v: usize, d: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let h = (u * self.image.1 + v) * self.depth + d;
        self.taps[self.starts[h]..self.starts[h + 1]].iter().map(|t| (t.voxel, t.weight))
    }

    fn check(&self, weights: &DenseGrid<T>, pixel: &DenseGrid<T>, volume: &DenseGrid<T>) -> Result<(usize, usize)> {
        let (nu, nv) = self.image;
        let c = match pixel.shape() {
            &[u, v, c] if u == nu && v == nv => c,
            other => return Err(Error::shape(format!("pixel grid {other:?} vs image {nu}×{nv}"))),
        };
        let g = match weights.shape() {
            &[u, v, g, d] if u == nu && v == nv && d == self.depth && g > 0 && c % g == 0 => g,
            other => return Err(Error::shape(format!("weights {other:?} vs {nu}×{nv}×G×{} with G | {c}", self.depth))),
        };
        let [h, w, z] = self.spec.extent;
        volume.expect_shape(&[h, w, z, c], "voxel volume")?;
        Ok((c, g))
    }

    /// `volume += lift(pixel)`.
    pub fn deposit(&self, pixel: &DenseGrid<T>, weights: &DenseGrid<T>, volume: &mut DenseGrid<T>) -> Result<()> {
        let (c, g) = self.check(weights, pixel, volume)?;
        let cg = c / g;
        let (nd, pw, vol) = (self.depth, pixel.data(), volume.data_mut());
        let wd = weights.data();
        for px in 0..self.image.0 * self.image.1 {
            let f = &pw[px * c..(px + 1) * c];
            for k in 0..nd {
                let h = px * nd + k;
                for tap in &self.taps[self.starts[h]..self.starts[h + 1]] {
                    let out = &mut vol[tap.voxel * c..(tap.voxel + 1) * c];
                    for gi in 0..g {
                        let s = wd[(px * g + gi) * nd + k] * tap.weight;
                        for ch in gi * cg..(gi + 1) * cg {
                            out[ch] += s * f[ch];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Adjoint of [`deposit`](Self::deposit) in the pixel features.
    pub fn gather(&self, weights: &DenseGrid<T>, volume: &DenseGrid<T>) -> Result<DenseGrid<T>> {
        let (nu, nv) = self.image;
        let c = *volume.shape().last().unwrap_or(&0);
        let mut out = DenseGrid::zeros(&[nu, nv, c.max(1)]);
        let (cc, g) = self.check(weights, &out, volume)?;
        let cg = cc / g;
        let (nd, vol, wd) = (self.depth, volume.data(), weights.data());
        let od = out.data_mut();
        for px in 0..nu * nv {
            let acc = &mut od[px * cc..(px + 1) * cc];
            for k in 0..nd {
                let h = px * nd + k;
                for tap in &self.taps[self.starts[h]..self.starts[h + 1]] {
                    let src = &vol[tap.voxel * cc..(tap.voxel + 1) * cc];
                    for gi in 0..g {
                        let s = wd[(px * g + gi) * nd + k] * tap.weight;
                        for ch in gi * cg..(gi + 1) * cg {
                            acc[ch] += s * src[ch];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of `Σ ω·w·pixel·volume` w.r.t. `ω` and the coordinates.
    pub fn bilinear_grads(
        &self,
        weights: &DenseGrid<T>,
        pixel: &DenseGrid<T>,
        volume: &DenseGrid<T>,
    ) -> Result<SplatGrads<T>> {
        let (c, g) = self.check(weights, pixel, volume)?;
        let cg = c / g;
        let nd = self.depth;
        let (pw, vol, wd) = (pixel.data(), volume.data(), weights.data());
        let mut dw = weights.zeros_like();
        let mut dcoords = vec![[T::zero(); 3]; self.points.len()];
        let soft = self.mode == SplatMode::Soft;
        let dwd = dw.data_mut();
        let mut group_dot = vec![T::zero(); g];
        for px in 0..self.image.0 * self.image.1 {
            let f = &pw[px * c..(px + 1) * c];
            for k in 0..nd {
                let h = px * nd + k;
                let mut dc = [T::zero(); 3];
                for tap in &self.taps[self.starts[h]..self.starts[h + 1]] {
                    let src = &vol[tap.voxel * c..(tap.voxel + 1) * c];
                    let mut through = T::zero();
                    for gi in 0..g {
                        let mut dot = T::zero();
                        for ch in gi * cg..(gi + 1) * cg {
                            dot += f[ch] * src[ch];
                        }
                        group_dot[gi] = dot;
                        dwd[(px * g + gi) * nd + k] += tap.weight * dot;
                        through += wd[(px * g + gi) * nd + k] * dot;
                    }
                    if soft {
                        for a in 0..3 {
                            dc[a] += tap.dweight[a] * through;
                        }
                    }
                }
                dcoords[h] = dc;
            }
        }
        Ok(SplatGrads { weights: dw, coords: dcoords })
    }

    /// Chains coordinate gradients into `∂/∂P_eff` and, when the plan was
    /// built with pixel offsets, `∂/∂(Δu, Δv, Δd)`.
    pub fn coords_backward(&self, dcoords: &[[T; 3]]) -> Result<([[T; 4]; 3], Option<DenseGrid<T>>)> {
        if dcoords.len() != self.points.len() {
            return Err(Error::shape("coordinate gradient length"));
        }
        let mut dp = [[T::zero(); 4]; 3];
        let mut doff = if self.has_offsets { Some(vec![T::zero(); self.points.len() * 3]) } else { None };
        let step = self.bins.step();
        for (h, (pt, dc)) in self.points.iter().zip(dcoords).enumerate() {
            if dc.iter().all(|&x| x == T::zero()) || !(pt[2] > T::zero()) {
                continue;
            }
            let (dph, du, dv, dd) = project_backward(&self.projection, pt[0], pt[1], pt[2], &self.spec, dc);
            for i in 0..3 {
                for j in 0..4 {
                    dp[i][j] += dph[i][j];
                }
            }
            if let Some(off) = doff.as_mut() {
                off[h * 3] += du;
                off[h * 3 + 1] += dv;
                off[h * 3 + 2] += dd * step;
            }
        }
        let (nu, nv) = self.image;
        let doff = match doff {
            Some(v) => Some(DenseGrid::from_vec(&[nu, nv, self.depth, 3], v)?),
            None => None,
        };
        Ok((dp, doff))
    }
}

fn as_groups<T: Real>(weights: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    match weights.shape() {
        &[u, v, d] => weights.clone().reshape(&[u, v, 1, d]),
        &[_, _, _, _] => Ok(weights.clone()),
        other => Err(Error::shape(format!("weights must be U×V×D or U×V×G×D, got {other:?}"))),
    }
}

fn lift<T: Real>(
    f_i: &DenseGrid<T>,
    weights: &DenseGrid<T>,
    p: &ProjectionMatrix<T>,
    offsets: Option<&DenseGrid<T>>,
    bins: &DepthBins<T>,
    spec: &VoxelGridSpec<T>,
    mode: SplatMode,
) -> Result<DenseGrid<T>> {
    let (u, v, c) = match f_i.shape() {
        &[u, v, c] => (u, v, c),
        other => return Err(Error::shape(format!("image features must be U×V×C, got {other:?}"))),
    };
    let weights = as_groups(weights)?;
    let geom = ViewGeometry { projection: *p, pixel_offsets: offsets, bins: *bins, spec: *spec, image: (u, v) };
    let plan = SplatPlan::build(&geom, mode)?;
    let [h, w, z] = spec.extent;
    let mut out = DenseGrid::zeros(&[h, w, z, c]);
    plan.deposit(f_i, &weights, &mut out)?;
    Ok(out)
}

/// Channel-grouped lifting with trilinear soft filling.
pub fn lift_soft<T: Real>(
    f_i: &DenseGrid<T>,
    weights: &GroupWeights<T>,
    p: &ProjectionMatrix<T>,
    offsets: Option<&DenseGrid<T>>,
    bins: &DepthBins<T>,
    spec: &VoxelGridSpec<T>,
) -> Result<DenseGrid<T>> {
    lift(f_i, weights.values(), p, offsets, bins, spec, SplatMode::Soft)
}

/// Baseline lifting: all mass to the rounded voxel. `geometry` may be a
/// depth simplex (`U×V×D`) or any non-negative weights, e.g. the oracle.
pub fn lift_nearest<T: Real>(
    f_i: &DenseGrid<T>,
    geometry: &DenseGrid<T>,
    p: &ProjectionMatrix<T>,
    bins: &DepthBins<T>,
    spec: &VoxelGridSpec<T>,
) -> Result<DenseGrid<T>> {
    lift(f_i, geometry, p, None, bins, spec, SplatMode::Nearest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{vjp_check, FnOp, SeededRng};

    #[test]
    fn integer_point_has_single_neighbor() {
        let spec = VoxelGridSpec::unit([6, 6, 6]);
        let nbs = trilinear_weights(&[2.0, 3.0, 4.0], &spec);
        let hot: Vec<_> = nbs.iter().filter(|n| n.weight > 0.0).collect();
        assert_eq!(hot.len(), 1);
        assert_eq!(hot[0].index, [2, 3, 4]);
        assert_eq!(hot[0].weight, 1.0);
    }

    #[test]
    fn half_point_splits_evenly() {
        let spec = VoxelGridSpec::unit([6, 6, 6]);
        let hot: Vec<_> = trilinear_weights(&[2.5, 3.0, 4.0], &spec).into_iter().filter(|n| n.weight > 0.0).collect();
        assert_eq!(hot.len(), 2);
        assert!(hot.iter().all(|n| n.weight == 0.5));
        let idx: Vec<_> = hot.iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![[2, 3, 4], [3, 3, 4]]);
    }

    #[test]
    fn weights_match_per_axis_product() {
        let spec = VoxelGridSpec::unit([6, 6, 6]);
        let mut rng = SeededRng::new(17);
        for _ in 0..200 {
            let x = [rng.uniform_range(0.0, 5.0), rng.uniform_range(0.0, 5.0), rng.uniform_range(0.0, 5.0)];
            let nbs = trilinear_weights(&x, &spec);
            let total: f64 = nbs.iter().map(|n| n.weight).sum();
            assert!((total - 1.0).abs() <= 1e-12);
            for n in &nbs {
                let mut want = 1.0;
                for a in 0..3 {
                    want *= (1.0 - (x[a] - n.index[a] as f64).abs()).max(0.0);
                }
                assert!((n.weight - want).abs() <= 1e-12);
                assert!(n.weight >= 0.0);
            }
        }
    }

    #[test]
    fn out_of_range_corners_flagged() {
        let spec = VoxelGridSpec::unit([3, 3, 3]);
        let nbs = trilinear_weights(&[-0.5, 1.2, 2.5], &spec);
        assert_eq!(nbs.iter().filter(|n| n.in_range).count(), 2);
    }

    fn ray_geometry() -> ProjectionMatrix<f64> {
        ProjectionMatrix::identity()
    }

    #[test]
    fn single_pixel_single_bin_copies_feature() {
        let spec = VoxelGridSpec::unit([4, 4, 4]);
        let bins = DepthBins::new(2.0, 2.0, 1).unwrap();
        let f = DenseGrid::from_vec(&[1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let w = GroupWeights::new(DenseGrid::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let vol = lift_soft(&f, &w, &ray_geometry(), None, &bins, &spec).unwrap();
        // u = v = 0 → (0, 0, 2)
        for c in 0..3 {
            assert_eq!(vol.get(&[0, 0, 2, c]), f.get(&[0, 0, c]));
        }
        assert_eq!(vol.sum(), f.sum());
    }

    #[test]
    fn two_bins_split_by_probability() {
        let spec = VoxelGridSpec::unit([4, 4, 4]);
        let bins = DepthBins::new(1.0, 2.0, 2).unwrap();
        let f = DenseGrid::from_vec(&[1, 1, 2], vec![1.5, -0.5]).unwrap();
        let w = GroupWeights::new(DenseGrid::from_vec(&[1, 1, 1, 2], vec![0.3, 0.7]).unwrap()).unwrap();
        let vol = lift_soft(&f, &w, &ray_geometry(), None, &bins, &spec).unwrap();
        for c in 0..2 {
            assert_eq!(vol.get(&[0, 0, 1, c]), 0.3 * f.get(&[0, 0, c]));
            assert_eq!(vol.get(&[0, 0, 2, c]), 0.7 * f.get(&[0, 0, c]));
        }
        let nearest = lift_nearest(&f, &w.values().clone().reshape(&[1, 1, 2]).unwrap(), &ray_geometry(), &bins, &spec).unwrap();
        assert_eq!(nearest, vol);
    }

    #[test]
    fn nearest_rounds_half_up() {
        let spec = VoxelGridSpec::unit([6, 6, 6]);
        let p = ProjectionMatrix::new([[1.0, 0.0, 0.0, 2.4], [0.0, 1.0, 0.0, 3.6], [0.0, 0.0, 1.0, 0.0]]).unwrap();
        let bins = DepthBins::new(4.5, 4.5, 1).unwrap();
        let f = DenseGrid::full(&[1, 1, 1], 1.0);
        let g = DenseGrid::full(&[1, 1, 1], 1.0);
        let vol = lift_nearest(&f, &g, &p, &bins, &spec).unwrap();
        assert_eq!(vol.get(&[2, 4, 5, 0]), 1.0);
        assert_eq!(vol.sum(), 1.0);
    }

    struct Case {
        f: DenseGrid<f64>,
        w: DenseGrid<f64>,
        off: DenseGrid<f64>,
        p: ProjectionMatrix<f64>,
        bins: DepthBins<f64>,
        spec: VoxelGridSpec<f64>,
        cot: DenseGrid<f64>,
    }

    fn case(seed: u64) -> Case {
        let mut rng = SeededRng::new(seed);
        let f = DenseGrid::from_fn(&[4, 4, 8], |_| rng.normal());
        let mut w = DenseGrid::from_fn(&[4, 4, 2, 3], |_| rng.uniform_range(0.1, 1.0));
        for px in w.data_mut().chunks_exact_mut(3) {
            let t: f64 = px.iter().sum();
            px.iter_mut().for_each(|x| *x /= t);
        }
        let off = DenseGrid::from_fn(&[4, 4, 3, 3], |_| rng.uniform_range(-0.4, 0.4));
        let p = ProjectionMatrix::new([
            [0.45 + 0.05 * rng.uniform(), 0.03, 0.0, 0.37],
            [0.02, 0.45 + 0.05 * rng.uniform(), 0.0, 0.41],
            [0.01, 0.0, 1.1, 0.13],
        ])
        .unwrap();
        let bins = DepthBins::new(1.0, 3.5, 3).unwrap();
        let spec = VoxelGridSpec::unit([6, 6, 6]);
        let cot = DenseGrid::from_fn(&[6, 6, 6, 8], |_| rng.normal());
        Case { f, w, off, p, bins, spec, cot }
    }

    fn splat(c: &Case, f: &DenseGrid<f64>, w: &DenseGrid<f64>, off: &DenseGrid<f64>, p: &ProjectionMatrix<f64>) -> Result<(SplatPlan<f64>, DenseGrid<f64>)> {
        let geom = ViewGeometry { projection: *p, pixel_offsets: Some(off), bins: c.bins, spec: c.spec, image: (4, 4) };
        let plan = SplatPlan::build(&geom, SplatMode::Soft)?;
        let mut out = DenseGrid::zeros(&[6, 6, 6, 8]);
        plan.deposit(f, w, &mut out)?;
        Ok((plan, out))
    }

    #[test]
    fn vjp_in_features_and_weights() {
        for seed in 0..3 {
            let c = case(seed);
            let op = FnOp::new(
                "lift/f",
                |x: &DenseGrid<f64>| Ok(splat(&c, x, &c.w, &c.off, &c.p)?.1),
                |x: &DenseGrid<f64>, g: &DenseGrid<f64>| splat(&c, x, &c.w, &c.off, &c.p)?.0.gather(&c.w, g),
            );
            assert!(vjp_check(&op, &c.f, &c.cot, 1e-5).unwrap().max_rel_error <= 1e-6);
            let op = FnOp::new(
                "lift/w",
                |x: &DenseGrid<f64>| Ok(splat(&c, &c.f, x, &c.off, &c.p)?.1),
                |x: &DenseGrid<f64>, g: &DenseGrid<f64>| {
                    Ok(splat(&c, &c.f, x, &c.off, &c.p)?.0.bilinear_grads(x, &c.f, g)?.weights)
                },
            );
            assert!(vjp_check(&op, &c.w, &c.cot, 1e-5).unwrap().max_rel_error <= 1e-6);
        }
    }

    #[test]
    fn vjp_in_offsets_and_projection() {
        for seed in 0..3 {
            let c = case(seed);
            let op = FnOp::new(
                "lift/offsets",
                |x: &DenseGrid<f64>| Ok(splat(&c, &c.f, &c.w, x, &c.p)?.1),
                |x: &DenseGrid<f64>, g: &DenseGrid<f64>| {
                    let plan = splat(&c, &c.f, &c.w, x, &c.p)?.0;
                    let grads = plan.bilinear_grads(&c.w, &c.f, g)?;
                    Ok(plan.coords_backward(&grads.coords)?.1.unwrap())
                },
            );
            let r = vjp_check(&op, &c.off, &c.cot, 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-6, "{r:?}");
            let p0 = DenseGrid::from_vec(&[12], c.p.flat().to_vec()).unwrap();
            let op = FnOp::new(
                "lift/P",
                |x: &DenseGrid<f64>| Ok(splat(&c, &c.f, &c.w, &c.off, &ProjectionMatrix::from_flat_unchecked(x.data()))?.1),
                |x: &DenseGrid<f64>, g: &DenseGrid<f64>| {
                    let plan = splat(&c, &c.f, &c.w, &c.off, &ProjectionMatrix::from_flat_unchecked(x.data()))?.0;
                    let grads = plan.bilinear_grads(&c.w, &c.f, g)?;
                    let dp = plan.coords_backward(&grads.coords)?.0;
                    DenseGrid::from_vec(&[12], dp.iter().flatten().copied().collect())
                },
            );
            let r = vjp_check(&op, &p0, &c.cot, 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-6, "{r:?}");
        }
    }

    #[test]
    fn nearest_blocks_coordinate_gradient() {
        let c = case(4);
        let geom = ViewGeometry { projection: c.p, pixel_offsets: Some(&c.off), bins: c.bins, spec: c.spec, image: (4, 4) };
        let plan = SplatPlan::build(&geom, SplatMode::Nearest).unwrap();
        let grads = plan.bilinear_grads(&c.w, &c.f, &c.cot).unwrap();
        let (dp, doff) = plan.coords_backward(&grads.coords).unwrap();
        assert!(dp.iter().flatten().all(|&x| x == 0.0));
        assert!(doff.unwrap().data().iter().all(|&x| x == 0.0));
        assert!(grads.weights.max_abs() > 0.0);
    }

    #[test]
    fn mass_is_conserved_in_grid() {
        let mut c = case(5);
        c.off.fill(0.0);
        c.p = ProjectionMatrix::new([[0.3, 0.02, 0.0, 0.7], [0.01, 0.3, 0.0, 0.6], [0.0, 0.0, 1.1, 0.4]]).unwrap();
        let (_, vol) = splat(&c, &c.f, &c.w, &c.off, &c.p).unwrap();
        let geom = ViewGeometry { projection: c.p, pixel_offsets: None, bins: c.bins, spec: c.spec, image: (4, 4) };
        let plan = SplatPlan::build(&geom, SplatMode::Soft).unwrap();
        let full = (0..4).all(|a| (0..4).all(|b| (0..3).all(|k| {
            (plan.taps_of(a, b, k).map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12
        })));
        assert!(full, "fixture must keep every hypothesis inside the grid");
        let per_c = vol.reduce_sum(&[0, 1, 2]).unwrap();
        let want = c.f.reduce_sum(&[0, 1]).unwrap();
        assert!(per_c.max_abs_diff(&want).unwrap() <= 1e-10);
    }

    #[test]
    fn lift_is_linear_in_features() {
        let c = case(6);
        let mut rng = SeededRng::new(60);
        let b = DenseGrid::from_fn(&[4, 4, 8], |_| rng.normal());
        let (alpha, beta) = (rng.normal(), rng.normal());
        let mut mix = c.f.scale(alpha);
        mix.axpy(beta, &b).unwrap();
        let lhs = splat(&c, &mix, &c.w, &c.off, &c.p).unwrap().1;
        let mut rhs = splat(&c, &c.f, &c.w, &c.off, &c.p).unwrap().1.scale(alpha);
        rhs.axpy(beta, &splat(&c, &b, &c.w, &c.off, &c.p).unwrap().1).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn single_group_matches_geometry_volume() {
        let c = case(7);
        let mut w = c.w.clone();
        w = w.reshape(&[4, 4, 6]).unwrap();
        let w1 = DenseGrid::from_fn(&[4, 4, 1, 3], |i| w.data()[(i / 3) * 6 + i % 3]);
        let geo = DenseGrid::from_vec(&[4, 4, 3], w1.data().to_vec()).unwrap();
        let gw = GroupWeights::new(w1).unwrap();
        let a = lift_soft(&c.f, &gw, &c.p, None, &c.bins, &c.spec).unwrap();
        let geom = ViewGeometry { projection: c.p, pixel_offsets: None, bins: c.bins, spec: c.spec, image: (4, 4) };
        let plan = SplatPlan::build(&geom, SplatMode::Soft).unwrap();
        let mut b = DenseGrid::zeros(&[6, 6, 6, 8]);
        plan.deposit(&c.f, &geo.reshape(&[4, 4, 1, 3]).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }
}
