//! Synthetic box worlds, ray-cast camera views and their on-disk bundles.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{DenseGrid, SeededRng};
use crate::error::{Error, Result};
use crate::geometry::{ProjectionMatrix, VoxelGridSpec};

pub const BUNDLE_MAGIC: &[u8; 8] = b"SCATSCN1";
const BUNDLE_VERSION: u32 = 1;
const MARCH_STEP: f64 = 0.25;

/// Box count for every class, or one count per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxCounts {
    Uniform(usize),
    PerClass(Vec<usize>),
}

impl BoxCounts {
    fn count(&self, class: usize) -> usize {
        match self {
            BoxCounts::Uniform(n) => *n,
            BoxCounts::PerClass(v) => v.get(class - 1).copied().unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub cameras: usize,
    /// `[U, V]`
    pub image: [usize; 2],
    pub fov_deg: f64,
    /// Eye distance from the grid centre, world units.
    pub distance: f64,
    pub elevation_deg: f64,
    pub azimuth_offset_deg: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig { cameras: 2, image: [8, 8], fov_deg: 60.0, distance: 5.5, elevation_deg: 30.0, azimuth_offset_deg: 45.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub extent: [usize; 3],
    pub voxel_size: f64,
    /// `S`, not counting the empty class.
    pub classes: usize,
    pub boxes_per_class: BoxCounts,
    /// Inclusive side-length range in voxels.
    pub box_size: [usize; 2],
    pub min_classes: usize,
    pub empty_fraction: [f64; 2],
    pub max_retries: usize,
    pub rig: RigConfig,
    pub feature_noise: f64,
    pub channels: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent: [8, 8, 8],
            voxel_size: 0.5,
            classes: 4,
            boxes_per_class: BoxCounts::Uniform(2),
            box_size: [2, 4],
            min_classes: 2,
            empty_fraction: [0.3, 0.9],
            max_retries: 100,
            rig: RigConfig::default(),
            feature_noise: 0.1,
            channels: 8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| e < 6) {
            return Err(Error::config(format!("grid extents {:?} must all be ≥ 6", self.extent)));
        }
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::config(format!("class count {} must be in 2..=254", self.classes)));
        }
        if let BoxCounts::PerClass(v) = &self.boxes_per_class {
            if v.len() != self.classes {
                return Err(Error::config(format!("{} box counts for {} classes", v.len(), self.classes)));
            }
        }
        let [lo, hi] = self.box_size;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("box size range {:?}", self.box_size)));
        }
        let [a, b] = self.empty_fraction;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
            return Err(Error::config(format!("empty fraction band {:?}", self.empty_fraction)));
        }
        if self.min_classes > self.classes {
            return Err(Error::config("min_classes exceeds class count"));
        }
        if !(self.voxel_size > 0.0) || !(self.feature_noise >= 0.0) {
            return Err(Error::config("voxel size must be > 0 and feature noise ≥ 0"));
        }
        if self.channels == 0 || self.rig.cameras == 0 || self.rig.image.contains(&0) {
            return Err(Error::config("channels, camera count and image size must be positive"));
        }
        if !(self.rig.fov_deg > 0.0 && self.rig.fov_deg < 180.0) || !(self.rig.distance > 0.0) {
            return Err(Error::config("camera fov must be in (0, 180) and distance > 0"));
        }
        Ok(())
    }

    /// Grid centred on the world origin.
    pub fn spec(&self) -> VoxelGridSpec<f64> {
        let origin = self.extent.map(|e| -(e as f64 - 1.0) * 0.5 * self.voxel_size);
        VoxelGridSpec { extent: self.extent, origin, voxel_size: [self.voxel_size; 3] }
    }
}

/// Ground-truth label grid (0 = empty), flat `h, w, z` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticWorld {
    pub spec: VoxelGridSpec<f64>,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl SemanticWorld {
    pub fn empty(spec: VoxelGridSpec<f64>, classes: usize) -> Self {
        SemanticWorld { labels: vec![0; spec.voxels()], spec, classes }
    }

    pub fn label_at(&self, idx: [i64; 3]) -> u8 {
        self.spec.flat(idx).map_or(0, |i| self.labels[i])
    }

    pub fn empty_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 0).count() as f64 / self.labels.len() as f64
    }

    pub fn occupied_classes(&self) -> usize {
        (1..=self.classes).filter(|&s| self.labels.contains(&(s as u8))).count()
    }

    /// Labels a box `[lo, lo + size)` if it is in the grid and free.
    pub fn place_box(&mut self, lo: [usize; 3], size: [usize; 3], class: u8) -> bool {
        let [nh, nw, nz] = self.spec.extent;
        if lo[0] + size[0] > nh || lo[1] + size[1] > nw || lo[2] + size[2] > nz {
            return false;
        }
        let cells = || {
            (lo[0]..lo[0] + size[0]).flat_map(move |h| {
                (lo[1]..lo[1] + size[1]).flat_map(move |w| (lo[2]..lo[2] + size[2]).map(move |z| (h * nw + w) * nz + z))
            })
        };
        if cells().any(|i| self.labels[i] != 0) {
            return false;
        }
        for i in cells() {
            self.labels[i] = class;
        }
        true
    }
}

/// Dynamic classes are the lower half of the non-empty ids.
pub fn dynamic_flags(classes: usize) -> Vec<bool> {
    let cut = (classes / 2).max(1);
    (0..=classes).map(|s| s >= 1 && s <= cut).collect()
}

pub fn gen_world(cfg: &SceneConfig, seed: u64) -> Result<SemanticWorld> {
    cfg.validate()?;
    let spec = cfg.spec();
    let root = SeededRng::new(seed);
    for attempt in 0..cfg.max_retries.max(1) {
        let mut rng = root.fork(attempt as u64);
        let mut world = SemanticWorld::empty(spec, cfg.classes);
        for s in 1..=cfg.classes {
            for _ in 0..cfg.boxes_per_class.count(s) {
                let mut size = [0; 3];
                let mut lo = [0; 3];
                for a in 0..3 {
                    size[a] = rng.between(cfg.box_size[0], cfg.box_size[1]).min(cfg.extent[a]);
                    lo[a] = rng.between(0, cfg.extent[a] - size[a]);
                }
                world.place_box(lo, size, s as u8);
            }
        }
        let ef = world.empty_fraction();
        if world.occupied_classes() >= cfg.min_classes && ef >= cfg.empty_fraction[0] && ef <= cfg.empty_fraction[1] {
            return Ok(world);
        }
    }
    Err(Error::config(format!(
        "no world with ≥ {} classes and empty fraction in {:?} after {} tries",
        cfg.min_classes, cfg.empty_fraction, cfg.max_retries
    )))
}

/// Pinhole camera; pixel `(u, v)` at depth `d` sits at `eye + d · Rᵀ K⁻¹ [u, v, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: [f64; 3],
    /// Rows are the camera axes in world coordinates.
    pub rotation: [[f64; 3]; 3],
    pub focal: f64,
    pub center: [f64; 2],
    pub image: [usize; 2],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn look_at(eye: [f64; 3], target: [f64; 3], fov_deg: f64, image: [usize; 2]) -> Self {
        let f = normalize(sub(target, eye));
        let mut up = [0.0, 0.0, 1.0];
        if cross(f, up).iter().all(|x| x.abs() < 1e-9) {
            up = [0.0, 1.0, 0.0];
        }
        let b = normalize(cross(f, up));
        let a = cross(b, f);
        let half = image[0].max(image[1]) as f64 * 0.5;
        let focal = half / (fov_deg.to_radians() * 0.5).tan();
        let center = [(image[0] as f64 - 1.0) * 0.5, (image[1] as f64 - 1.0) * 0.5];
        Camera { eye, rotation: [a, b, f], focal, center, image }
    }

    /// World direction for pixel `(u, v)`, scaled so its depth component is 1.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        let c = [(u - self.center[0]) / self.focal, (v - self.center[1]) / self.focal, 1.0];
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[0][i] * c[0] + r[1][i] * c[1] + r[2][i] * c[2])
    }

    /// `P = [Rᵀ K⁻¹ | eye]`.
    pub fn projection(&self) -> Result<ProjectionMatrix<f64>> {
        let fi = 1.0 / self.focal;
        let kinv = [[fi, 0.0, -self.center[0] * fi], [0.0, fi, -self.center[1] * fi], [0.0, 0.0, 1.0]];
        let r = &self.rotation;
        let mut e = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                e[i][j] = (0..3).map(|k| r[k][i] * kinv[k][j]).sum();
            }
            e[i][3] = self.eye[i];
        }
        ProjectionMatrix::new(e)
    }
}

pub fn camera_rig(cfg: &SceneConfig) -> Vec<Camera> {
    let rig = &cfg.rig;
    let el = rig.elevation_deg.to_radians();
    (0..rig.cameras)
        .map(|k| {
            let az = (rig.azimuth_offset_deg + 360.0 * k as f64 / rig.cameras as f64).to_radians();
            let eye = [rig.distance * el.cos() * az.cos(), rig.distance * el.cos() * az.sin(), rig.distance * el.sin()];
            Camera::look_at(eye, [0.0; 3], rig.fov_deg, rig.image)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub camera: Camera,
    pub projection: ProjectionMatrix<f64>,
    /// `U×V`, first-hit class or 0.
    pub labels: Vec<u8>,
    /// `U×V`, first-hit depth or `+∞`.
    pub depth: Vec<f64>,
    /// `U×V×C`
    pub features: DenseGrid<f64>,
}

/// Parameter interval where `origin + t · dir` lies inside the grid box
/// `[−½, extent − ½]` in index space.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// First-hit label and depth for one pixel.
pub fn cast_ray(world: &SemanticWorld, camera: &Camera, u: f64, v: f64) -> (u8, f64) {
    let spec = &world.spec;
    let o = spec.world_to_index(&camera.eye);
    let dw = camera.ray(u, v);
    let dir = [0, 1, 2].map(|a| dw[a] / spec.voxel_size[a]);
    let hi = spec.extent.map(|e| e as f64 - 0.5);
    let Some((t0, t1)) = ray_box(o, dir, [-0.5; 3], hi) else {
        return (0, f64::INFINITY);
    };
    let speed = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let step = MARCH_STEP / speed;
    let at = |t: f64| world.label_at(spec.nearest(&[o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]]));
    let start = t0.max(0.0) + 1e-9 * step;
    let mut prev = start;
    let mut t = start;
    while t <= t1 {
        if at(t) != 0 {
            if t == start {
                return (at(t), t);
            }
            let (mut lo, mut hi) = (prev, t);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if at(mid) != 0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return (at(hi), hi);
        }
        prev = t;
        t += step;
    }
    (0, f64::INFINITY)
}

pub fn render_labels(world: &SemanticWorld, camera: &Camera) -> (Vec<u8>, Vec<f64>) {
    let [nu, nv] = camera.image;
    let mut labels = Vec::with_capacity(nu * nv);
    let mut depth = Vec::with_capacity(nu * nv);
    for u in 0..nu {
        for v in 0..nv {
            let (l, d) = cast_ray(world, camera, u as f64, v as f64);
            labels.push(l);
            depth.push(d);
        }
    }
    (labels, depth)
}

/// `S + 1` unit-norm Gaussian embeddings, shape `(S+1)×C`.
pub fn class_embeddings(classes: usize, channels: usize, rng: &mut SeededRng) -> DenseGrid<f64> {
    let mut e = DenseGrid::from_fn(&[classes + 1, channels], |_| rng.normal());
    for row in e.data_mut().chunks_exact_mut(channels) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    e
}

/// `f_i(u, v) = embedding[label(u, v)] + N(0, σ²)`.
pub fn make_features(labels: &[u8], image: [usize; 2], embeddings: &DenseGrid<f64>, sigma: f64, seed: u64) -> Result<DenseGrid<f64>> {
    let (rows, c) = match embeddings.shape() {
        &[r, c] => (r, c),
        other => return Err(Error::shape(format!("embeddings must be (S+1)×C, got {other:?}"))),
    };
    if labels.len() != image[0] * image[1] {
        return Err(Error::shape("label image size"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= rows) {
        return Err(Error::shape(format!("label {bad} has no embedding")));
    }
    let mut rng = SeededRng::new(seed);
    let e = embeddings.data();
    Ok(DenseGrid::from_fn(&[image[0], image[1], c], |i| {
        let base = e[labels[i / c] as usize * c + i % c];
        if sigma == 0.0 {
            base
        } else {
            base + sigma * rng.normal()
        }
    }))
}

pub fn render_view(world: &SemanticWorld, camera: &Camera, embeddings: &DenseGrid<f64>, sigma: f64, seed: u64) -> Result<RenderedView> {
    let (labels, depth) = render_labels(world, camera);
    let features = make_features(&labels, camera.image, embeddings, sigma, seed)?;
    Ok(RenderedView { camera: *camera, projection: camera.projection()?, labels, depth, features })
}

/// One synthetic sample: world, its views, and the embedding table used.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub seed: u64,
    pub world: SemanticWorld,
    pub embeddings: DenseGrid<f64>,
    pub views: Vec<RenderedView>,
}

/// Streams: 0 world, 1 embeddings, 2 + k features of view k.
pub fn generate_scene(cfg: &SceneConfig, seed: u64, embeddings: Option<&DenseGrid<f64>>) -> Result<Scene> {
    let world = gen_world(cfg, SeededRng::new(seed).fork(0).seed())?;
    let embeddings = match embeddings {
        Some(e) => {
            e.expect_shape(&[cfg.classes + 1, cfg.channels], "embeddings")?;
            e.clone()
        }
        None => class_embeddings(cfg.classes, cfg.channels, &mut SeededRng::new(seed).fork(1)),
    };
    let root = SeededRng::new(seed);
    let views = camera_rig(cfg)
        .iter()
        .enumerate()
        .map(|(k, cam)| render_view(&world, cam, &embeddings, cfg.feature_noise, root.fork(2 + k as u64).seed()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene { config: cfg.clone(), seed, world, embeddings, views })
}

#[derive(Serialize, Deserialize)]
struct Section {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    version: u32,
    config: SceneConfig,
    seed: u64,
    cameras: Vec<Camera>,
    projections: Vec<[[f64; 4]; 3]>,
    sections: Vec<Section>,
}

struct Payload {
    sections: Vec<Section>,
    bytes: Vec<u8>,
}

impl Payload {
    fn f64s(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.push(name, "f64", shape);
        data.iter().for_each(|x| self.bytes.extend_from_slice(&x.to_le_bytes()));
    }

    fn i32s(&mut self, name: &str, shape: &[usize], data: &[u8]) {
        self.push(name, "i32", shape);
        data.iter().for_each(|&x| self.bytes.extend_from_slice(&(x as i32).to_le_bytes()));
    }

    fn push(&mut self, name: &str, dtype: &str, shape: &[usize]) {
        self.sections.push(Section { name: name.into(), dtype: dtype.into(), shape: shape.to_vec(), offset: self.bytes.len() as u64 });
    }
}

pub fn write_bundle(path: &Path, scene: &Scene) -> Result<()> {
    let mut p = Payload { sections: Vec::new(), bytes: Vec::new() };
    p.i32s("world", &scene.world.spec.extent, &scene.world.labels);
    p.f64s("embeddings", scene.embeddings.shape(), scene.embeddings.data());
    for (k, v) in scene.views.iter().enumerate() {
        let [nu, nv] = v.camera.image;
        p.i32s(&format!("view{k}.labels"), &[nu, nv], &v.labels);
        p.f64s(&format!("view{k}.depth"), &[nu, nv], &v.depth);
        p.f64s(&format!("view{k}.features"), v.features.shape(), v.features.data());
    }
    let header = BundleHeader {
        version: BUNDLE_VERSION,
        config: scene.config.clone(),
        seed: scene.seed,
        cameras: scene.views.iter().map(|v| v.camera).collect(),
        projections: scene.views.iter().map(|v| *v.projection.entries()).collect(),
        sections: p.sections,
    };
    let json = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(BUNDLE_MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&p.bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Scene> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != BUNDLE_MAGIC {
        return Err(Error::Format(format!("{}: not a scene bundle", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: BundleHeader = serde_json::from_slice(&bytes[16..body])?;
    if header.version != BUNDLE_VERSION {
        return Err(Error::Format(format!("unsupported bundle version {}", header.version)));
    }
    header.config.validate()?;
    let payload = &bytes[body..];
    let find = |name: &str, dtype: &str| -> Result<(&Section, &[u8])> {
        let s = header
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("missing section {name}")))?;
        if s.dtype != dtype {
            return Err(Error::Format(format!("section {name} has dtype {}", s.dtype)));
        }
        let n: usize = s.shape.iter().product::<usize>() * if dtype == "f64" { 8 } else { 4 };
        let start = s.offset as usize;
        let raw = payload.get(start..start + n).ok_or_else(|| Error::Format(format!("section {name} out of bounds")))?;
        Ok((s, raw))
    };
    let f64s = |name: &str| -> Result<DenseGrid<f64>> {
        let (s, raw) = find(name, "f64")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        DenseGrid::from_vec(&s.shape, data)
    };
    let labels = |name: &str| -> Result<Vec<u8>> {
        let (_, raw) = find(name, "i32")?;
        raw.chunks_exact(4)
            .map(|c| {
                let x = i32::from_le_bytes(c.try_into().expect("4 bytes"));
                u8::try_from(x).map_err(|_| Error::Format(format!("label {x} out of range")))
            })
            .collect()
    };
    let cfg = header.config;
    let spec = cfg.spec();
    let world_labels = labels("world")?;
    if world_labels.len() != spec.voxels() {
        return Err(Error::Format("world section size".into()));
    }
    let world = SemanticWorld { spec, labels: world_labels, classes: cfg.classes };
    let embeddings = f64s("embeddings")?;
    let mut views = Vec::new();
    for (k, (camera, p)) in header.cameras.iter().zip(&header.projections).enumerate() {
        let depth = f64s(&format!("view{k}.depth"))?;
        views.push(RenderedView {
            camera: *camera,
            projection: ProjectionMatrix::new(*p)?,
            labels: labels(&format!("view{k}.labels"))?,
            depth: depth.into_vec(),
            features: f64s(&format!("view{k}.features"))?,
        });
    }
    Ok(Scene { config: cfg, seed: header.seed, world, embeddings, views })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    fn one_box_cfg() -> SceneConfig {
        SceneConfig {
            extent: [6, 6, 6],
            boxes_per_class: BoxCounts::PerClass(vec![1, 0]),
            classes: 2,
            box_size: [2, 2],
            min_classes: 1,
            empty_fraction: [0.0, 1.0],
            ..SceneConfig::default()
        }
    }

    #[test]
    fn single_box_has_eight_voxels() {
        let w = gen_world(&one_box_cfg(), 3).unwrap();
        assert_eq!(w.labels.iter().filter(|&&l| l == 1).count(), 8);
        assert_eq!(w.labels.iter().filter(|&&l| l > 1).count(), 0);
    }

    #[test]
    fn worlds_are_deterministic_and_in_band() {
        let cfg = SceneConfig::default();
        assert_eq!(gen_world(&cfg, 11).unwrap(), gen_world(&cfg, 11).unwrap());
        for seed in 0..100 {
            let w = gen_world(&cfg, seed).unwrap();
            let ef = w.empty_fraction();
            assert!((0.3..=0.9).contains(&ef), "seed {seed}: {ef}");
            assert!(w.occupied_classes() >= 2);
        }
    }

    #[test]
    fn impossible_band_is_config_error() {
        let cfg = SceneConfig { empty_fraction: [0.0, 0.01], max_retries: 5, ..SceneConfig::default() };
        assert!(matches!(gen_world(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn empty_world_renders_background() {
        let cfg = SceneConfig::default();
        let w = SemanticWorld::empty(cfg.spec(), cfg.classes);
        let (l, d) = render_labels(&w, &camera_rig(&cfg)[0]);
        assert!(l.iter().all(|&x| x == 0));
        assert!(d.iter().all(|x| x.is_infinite()));
    }

    #[test]
    fn wall_fills_frustum() {
        let cfg = SceneConfig::default();
        let mut w = SemanticWorld::empty(cfg.spec(), cfg.classes);
        assert!(w.place_box([0, 0, 0], [8, 8, 2], 2));
        // camera above the grid looking straight down onto the wall at the bottom
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], 20.0, [6, 6]);
        let (l, _) = render_labels(&w, &cam);
        assert!(l.iter().all(|&x| x == 2));
    }

    #[test]
    fn depth_matches_box_intersection() {
        let cfg = SceneConfig::default();
        let mut w = SemanticWorld::empty(cfg.spec(), cfg.classes);
        w.place_box([2, 3, 1], [3, 2, 4], 1);
        let spec = w.spec;
        let mut hits = 0;
        for cam in camera_rig(&cfg) {
            let (l, d) = render_labels(&w, &cam);
            for u in 0..8 {
                for v in 0..8 {
                    let o = spec.world_to_index(&cam.eye);
                    let dw = cam.ray(u as f64, v as f64);
                    let dir = dw.map(|x| x / spec.voxel_size[0]);
                    let want = ray_box(o, dir, [1.5, 2.5, 0.5], [4.5, 4.5, 4.5]);
                    let i = u * 8 + v;
                    match want {
                        Some((t0, _)) if t0 > 0.0 => {
                            hits += 1;
                            let speed = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                            assert_eq!(l[i], 1);
                            assert!((d[i] - t0).abs() <= 0.5 * MARCH_STEP / speed);
                        }
                        _ => assert_eq!(l[i], 0),
                    }
                }
            }
        }
        assert!(hits > 10);
    }

    #[test]
    fn rendering_is_consistent_with_projection() {
        let cfg = SceneConfig::default();
        let scene = generate_scene(&cfg, 5, None).unwrap();
        let spec = scene.world.spec;
        for view in &scene.views {
            let [_, nv] = view.camera.image;
            for (i, (&l, &d)) in view.labels.iter().zip(&view.depth).enumerate() {
                if l == 0 {
                    continue;
                }
                let p = project(&view.projection, (i / nv) as f64, (i % nv) as f64, d, &spec).unwrap();
                assert_eq!(scene.world.label_at(spec.nearest(&p.coord)), l);
            }
        }
    }

    #[test]
    fn features_follow_embeddings() {
        let mut rng = SeededRng::new(2);
        let e = class_embeddings(3, 4, &mut rng);
        for row in e.data().chunks_exact(4) {
            assert!((row.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let labels = [0u8, 2, 2, 3];
        let f = make_features(&labels, [2, 2], &e, 0.0, 1).unwrap();
        assert_eq!(&f.data()[4..8], &e.data()[8..12]);
        assert_eq!(&f.data()[4..8], &f.data()[8..12]);

        let sigma = 0.1;
        let n = 10_000;
        let mut mean = vec![0.0; 16];
        for s in 0..n {
            let f = make_features(&labels, [2, 2], &e, sigma, 100 + s).unwrap();
            mean.iter_mut().zip(f.data()).for_each(|(m, x)| *m += x / n as f64);
        }
        for (i, m) in mean.iter().enumerate() {
            let want = e.data()[labels[i / 4] as usize * 4 + i % 4];
            assert!((m - want).abs() <= 3.0 * sigma / 100.0);
        }
    }

    #[test]
    fn bundle_round_trip() {
        let scene = generate_scene(&SceneConfig::default(), 9, None).unwrap();
        assert_eq!(scene, generate_scene(&SceneConfig::default(), 9, None).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.scn");
        write_bundle(&p, &scene).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], BUNDLE_MAGIC);
        assert_eq!(read_bundle(&p).unwrap(), scene);
        std::fs::write(&p, &bytes[..40]).unwrap();
        assert!(read_bundle(&p).is_err());
    }

    #[test]
    fn dynamic_split() {
        assert_eq!(dynamic_flags(4), vec![false, true, true, false, false]);
        assert_eq!(dynamic_flags(3), vec![false, true, false, false]);
    }
}
