//! Registry of every differentiable operator and the finite-difference
//! sweep over it.

use serde::{Deserialize, Serialize};

use scat_core::causal::{
    attention, attention_backward, bce_grad, bce_loss, influence_map, influence_map_backward, volume_influence,
    volume_influence_backward,
};
use scat_core::diffcore::{vjp_check, DenseGrid, DiffOp, FnOp, Mlp, SeededRng};
use scat_core::geometry::{
    predict_global_offset, predict_pixel_offsets, project, project_backward, CameraOffsetParams, OffsetScales,
    ProjectionMatrix, VoxelGridSpec,
};
use scat_core::lifting::{predict_group_weights, DepthBins, LiftHeadParams, SplatMode, SplatPlan, ViewGeometry};
use scat_core::normconv::{
    normalize_channel, normalize_channel_backward, normalize_spatial, normalize_spatial_backward, pointwise,
    pointwise_adjoint, pointwise_kernel_grad, transposed_depthwise, transposed_depthwise_adjoint,
    transposed_depthwise_kernel_grad, ConvStack,
};
use scat_core::occhead::{decode, occupancy_ce, occupancy_ce_grad};
use scat_core::Result;

use crate::config::GradcheckConfig;
use crate::error::{HarnessError, HarnessResult};
use crate::suite::mix;

type Grid = DenseGrid<f64>;

const IMAGE: (usize, usize) = (4, 4);
const CHANNELS: usize = 8;
const GROUPS: usize = 2;
const EXTENT: [usize; 3] = [6, 6, 6];
const HIDDEN: usize = 6;
/// Depth-bin counts cycled over the inputs of each operator.
const DEPTHS: [usize; 10] = [3, 16, 4, 12, 5, 8, 6, 10, 7, 14];
/// Coordinates closer than this to an integer sit on a trilinear kink.
const KINK_MARGIN: f64 = 1e-3;

/// One seeded input for one operator.
pub struct Case {
    pub op: Box<dyn DiffOp<f64>>,
    pub input: Grid,
    pub cotangent: Grid,
}

pub type Builder = fn(u64, usize) -> Result<Case>;

/// Wraps an operator and scales its adjoint by 1.001 (fault fixture).
struct Corrupted(Box<dyn DiffOp<f64>>);

impl DiffOp<f64> for Corrupted {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn forward(&self, input: &Grid) -> Result<Grid> {
        self.0.forward(input)
    }

    fn adjoint(&self, input: &Grid, cotangent: &Grid) -> Result<Grid> {
        Ok(self.0.adjoint(input, cotangent)?.scale(1.001))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub name: String,
    pub inputs: usize,
    pub max_rel_error: f64,
    /// Input (0-based) and flat element where the error peaks.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub operators: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.operators.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&OpReport> {
        self.operators.iter().filter(|o| !o.passed).collect()
    }
}

pub fn run_gradcheck(cfg: &GradcheckConfig, seed: u64) -> HarnessResult<GradcheckReport> {
    let ops = registry();
    if let Some(name) = &cfg.corrupt {
        if !ops.iter().any(|(n, _)| n == name) {
            return Err(HarnessError::Config(format!("no operator named {name:?}")));
        }
    }
    let mut reports = Vec::with_capacity(ops.len());
    for (k, (name, build)) in ops.iter().enumerate() {
        let mut rep = OpReport {
            name: name.to_string(),
            inputs: cfg.inputs,
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..cfg.inputs {
            let mut case = build(mix(&[seed, k as u64, i as u64]), i)?;
            if cfg.corrupt.as_deref() == Some(name) {
                case.op = Box::new(Corrupted(case.op));
            }
            let r = vjp_check(case.op.as_ref(), &case.input, &case.cotangent, cfg.step)?;
            if r.max_rel_error > rep.max_rel_error || i == 0 {
                rep.max_rel_error = r.max_rel_error;
                rep.worst_input = i;
                rep.worst_index = r.worst_index;
                rep.analytic = r.analytic;
                rep.numeric = r.numeric;
            }
        }
        rep.passed = rep.max_rel_error <= cfg.tolerance;
        reports.push(rep);
    }
    Ok(GradcheckReport { tolerance: cfg.tolerance, operators: reports })
}

/// Every registered operator, in report order.
pub fn registry() -> Vec<(&'static str, Builder)> {
    vec![
        ("lift_head/features", lift_head_features),
        ("lift_head/params", lift_head_params),
        ("lift/features", lift_features),
        ("lift/weights", lift_weights),
        ("lift/pixel_offsets", lift_offsets),
        ("lift/projection", lift_projection),
        ("projection/matrix", projection_matrix),
        ("global_offset/params", global_offset_params),
        ("global_offset/features", global_offset_features),
        ("pixel_offset/params", pixel_offset_params),
        ("pixel_offset/features", pixel_offset_features),
        ("kernel_norm/spatial", kernel_norm_spatial),
        ("kernel_norm/channel", kernel_norm_channel),
        ("depthwise/input", depthwise_input),
        ("depthwise/kernel", depthwise_kernel),
        ("pointwise/input", pointwise_input),
        ("pointwise/kernel", pointwise_kernel),
        ("conv_chain/input", chain_input),
        ("conv_chain/logits", chain_logits),
        ("conv_chain_adjoint/logits", chain_adjoint_logits),
        ("influence/weights", influence_weights),
        ("influence/pixel_offsets", influence_offsets),
        ("influence/indicator", influence_indicator),
        ("influence/kernel_logits", influence_kernels),
        ("attention", attention_op),
        ("bce", bce_op),
        ("decoder/params", decoder_params),
        ("decoder/features+ce", decoder_features_ce),
    ]
}

fn normal(shape: &[usize], rng: &mut SeededRng, scale: f64) -> Grid {
    DenseGrid::from_fn(shape, |_| scale * rng.normal())
}

fn flat(v: Vec<f64>) -> Grid {
    let n = v.len();
    DenseGrid::from_vec(&[n], v).expect("1D")
}

fn simplex(shape: &[usize], rng: &mut SeededRng) -> Grid {
    let d = *shape.last().expect("non-empty shape");
    let mut w = DenseGrid::from_fn(shape, |_| rng.uniform_range(0.1, 1.0));
    for row in w.data_mut().chunks_exact_mut(d) {
        let t: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= t);
    }
    w
}

/// A view whose every hypothesis projects at least `KINK_MARGIN` away from
/// integer coordinates.
#[derive(Clone)]
struct Lifting {
    f: Grid,
    w: Grid,
    offsets: Grid,
    p: ProjectionMatrix<f64>,
    bins: DepthBins<f64>,
    spec: VoxelGridSpec<f64>,
}

impl Lifting {
    fn new(rng: &mut SeededRng, depth: usize) -> Result<Self> {
        let (nu, nv) = IMAGE;
        let bins = DepthBins::new(1.0, 3.5, depth)?;
        let spec = VoxelGridSpec::unit(EXTENT);
        let f = normal(&[nu, nv, CHANNELS], rng, 1.0);
        let w = simplex(&[nu, nv, GROUPS, depth], rng);
        loop {
            let offsets = DenseGrid::from_fn(&[nu, nv, depth, 3], |_| rng.uniform_range(-0.4, 0.4));
            let p = ProjectionMatrix::new([
                [0.45 + 0.05 * rng.uniform(), 0.03, 0.0, 0.3 + 0.1 * rng.uniform()],
                [0.02, 0.45 + 0.05 * rng.uniform(), 0.0, 0.3 + 0.1 * rng.uniform()],
                [0.01, 0.0, 1.1, 0.1 * rng.uniform()],
            ])?;
            let l = Lifting { f: f.clone(), w: w.clone(), offsets, p, bins, spec };
            if l.clear_of_kinks()? {
                return Ok(l);
            }
        }
    }

    fn clear_of_kinks(&self) -> Result<bool> {
        let (nu, nv) = IMAGE;
        let nd = self.bins.count;
        for a in 0..nu {
            for b in 0..nv {
                for k in 0..nd {
                    let o = &self.offsets.data()[((a * nv + b) * nd + k) * 3..][..3];
                    let d = self.bins.depth(k as f64 + o[2]);
                    let c = project(&self.p, a as f64 + o[0], b as f64 + o[1], d, &self.spec)?.coord;
                    if c.iter().any(|x| (x - x.round()).abs() < KINK_MARGIN) {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }

    fn plan(&self, offsets: &Grid, p: &ProjectionMatrix<f64>) -> Result<SplatPlan<f64>> {
        let geom = ViewGeometry { projection: *p, pixel_offsets: Some(offsets), bins: self.bins, spec: self.spec, image: IMAGE };
        SplatPlan::build(&geom, SplatMode::Soft)
    }

    fn lift(&self, plan: &SplatPlan<f64>, f: &Grid, w: &Grid) -> Result<Grid> {
        let [h, ww, z] = EXTENT;
        let mut out = DenseGrid::zeros(&[h, ww, z, CHANNELS]);
        plan.deposit(f, w, &mut out)?;
        Ok(out)
    }

    fn volume_cotangent(rng: &mut SeededRng) -> Grid {
        let [h, w, z] = EXTENT;
        normal(&[h, w, z, CHANNELS], rng, 1.0)
    }
}

fn boxed<F, G>(name: &str, forward: F, adjoint: G) -> Box<dyn DiffOp<f64>>
where
    F: Fn(&Grid) -> Result<Grid> + 'static,
    G: Fn(&Grid, &Grid) -> Result<Grid> + 'static,
{
    Box::new(FnOp::new(name, forward, adjoint))
}

fn lift_head(rng: &mut SeededRng, depth: usize) -> Result<LiftHeadParams<f64>> {
    let mut head = LiftHeadParams::init(CHANNELS, HIDDEN, GROUPS, depth, rng)?;
    head.mlp.w2 = normal(head.mlp.w2.shape(), rng, 1.0);
    head.mlp.b2 = normal(head.mlp.b2.shape(), rng, 0.5);
    Ok(head)
}

fn lift_head_features(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let d = DEPTHS[i % DEPTHS.len()];
    let head = lift_head(&mut rng, d)?;
    let input = normal(&[IMAGE.0, IMAGE.1, CHANNELS], &mut rng, 1.0);
    let cotangent = normal(&[IMAGE.0, IMAGE.1, GROUPS, d], &mut rng, 1.0);
    let h2 = head.clone();
    let op = boxed(
        "lift_head/features",
        move |f| Ok(predict_group_weights(f, &head)?.0.into_inner()),
        move |f, g| {
            let (w, cache) = predict_group_weights(f, &h2)?;
            Ok(cache.backward(&h2, f, &w, g, true)?.1.expect("input gradient"))
        },
    );
    Ok(Case { op, input, cotangent })
}

fn lift_head_params(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let d = DEPTHS[i % DEPTHS.len()];
    let head = lift_head(&mut rng, d)?;
    let f = normal(&[IMAGE.0, IMAGE.1, CHANNELS], &mut rng, 1.0);
    let cotangent = normal(&[IMAGE.0, IMAGE.1, GROUPS, d], &mut rng, 1.0);
    let input = flat(head.mlp.flatten());
    let with = move |t: &Grid| -> Result<LiftHeadParams<f64>> {
        let mut h = head.clone();
        h.mlp.unflatten(t.data())?;
        Ok(h)
    };
    let with2 = with.clone();
    let f2 = f.clone();
    let op = boxed(
        "lift_head/params",
        move |t| Ok(predict_group_weights(&f, &with(t)?)?.0.into_inner()),
        move |t, g| {
            let h = with2(t)?;
            let (w, cache) = predict_group_weights(&f2, &h)?;
            Ok(flat(cache.backward(&h, &f2, &w, g, false)?.0.flatten()))
        },
    );
    Ok(Case { op, input, cotangent })
}

fn lift_features(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let l = Lifting::new(&mut rng, DEPTHS[i % DEPTHS.len()])?;
    let plan = l.plan(&l.offsets, &l.p)?;
    let cotangent = Lifting::volume_cotangent(&mut rng);
    let (l2, plan2) = (l.clone(), plan.clone());
    let input = l.f.clone();
    let op = boxed("lift/features", move |f| l.lift(&plan, f, &l.w), move |_, g| plan2.gather(&l2.w, g));
    Ok(Case { op, input, cotangent })
}

fn lift_weights(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let l = Lifting::new(&mut rng, DEPTHS[i % DEPTHS.len()])?;
    let plan = l.plan(&l.offsets, &l.p)?;
    let cotangent = Lifting::volume_cotangent(&mut rng);
    let (l2, plan2) = (l.clone(), plan.clone());
    let input = l.w.clone();
    let op = boxed(
        "lift/weights",
        move |w| l.lift(&plan, &l.f, w),
        move |w, g| Ok(plan2.bilinear_grads(w, &l2.f, g)?.weights),
    );
    Ok(Case { op, input, cotangent })
}

fn lift_offsets(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let l = Lifting::new(&mut rng, DEPTHS[i % DEPTHS.len()])?;
    let cotangent = Lifting::volume_cotangent(&mut rng);
    let l2 = l.clone();
    let input = l.offsets.clone();
    let op = boxed(
        "lift/pixel_offsets",
        move |o| l.lift(&l.plan(o, &l.p)?, &l.f, &l.w),
        move |o, g| {
            let plan = l2.plan(o, &l2.p)?;
            let grads = plan.bilinear_grads(&l2.w, &l2.f, g)?;
            Ok(plan.coords_backward(&grads.coords)?.1.expect("offsets were used"))
        },
    );
    Ok(Case { op, input, cotangent })
}

fn lift_projection(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let l = Lifting::new(&mut rng, DEPTHS[i % DEPTHS.len()])?;
    let cotangent = Lifting::volume_cotangent(&mut rng);
    let l2 = l.clone();
    let input = flat(l.p.flat().to_vec());
    let op = boxed(
        "lift/projection",
        move |t| l.lift(&l.plan(&l.offsets, &ProjectionMatrix::from_flat_unchecked(t.data()))?, &l.f, &l.w),
        move |t, g| {
            let plan = l2.plan(&l2.offsets, &ProjectionMatrix::from_flat_unchecked(t.data()))?;
            let grads = plan.bilinear_grads(&l2.w, &l2.f, g)?;
            Ok(flat(plan.coords_backward(&grads.coords)?.0.iter().flatten().copied().collect()))
        },
    );
    Ok(Case { op, input, cotangent })
}

/// `P ↦` continuous voxel coordinates of a fixed set of `(u, v, d)` points.
fn projection_matrix(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let l = Lifting::new(&mut rng, DEPTHS[i % DEPTHS.len()])?;
    let spec = VoxelGridSpec::new(EXTENT, [rng.normal(), rng.normal(), rng.normal()], [0.5, 0.5, 0.25])?;
    let points: Vec<[f64; 3]> = (0..10).map(|_| [rng.uniform_range(0.0, 4.0), rng.uniform_range(0.0, 4.0), rng.uniform_range(1.0, 4.0)]).collect();
    let cotangent = normal(&[points.len() * 3], &mut rng, 1.0);
    let pts = points.clone();
    let input = flat(l.p.flat().to_vec());
    let op = boxed(
        "projection/matrix",
        move |t| {
            let p = ProjectionMatrix::from_flat_unchecked(t.data());
            let mut out = Vec::new();
            for q in &points {
                out.extend(project(&p, q[0], q[1], q[2], &spec)?.coord);
            }
            Ok(flat(out))
        },
        move |t, g| {
            let p = ProjectionMatrix::from_flat_unchecked(t.data());
            let mut acc = [0.0; 12];
            for (k, q) in pts.iter().enumerate() {
                let dc = [g.data()[3 * k], g.data()[3 * k + 1], g.data()[3 * k + 2]];
                let (dp, ..) = project_backward(&p, q[0], q[1], q[2], &spec, &dc);
                for (a, x) in acc.iter_mut().zip(dp.iter().flatten()) {
                    *a += x;
                }
            }
            Ok(flat(acc.to_vec()))
        },
    );
    Ok(Case { op, input, cotangent })
}

fn offset_params(rng: &mut SeededRng, depth: usize) -> CameraOffsetParams<f64> {
    let mut params = CameraOffsetParams::init(CHANNELS, HIDDEN, depth, OffsetScales { pixel: 1.0, depth: 1.0, matrix: 0.3 }, rng);
    for t in [&mut params.global, &mut params.pixel] {
        for x in t.w2.data_mut().iter_mut().chain(t.b2.data_mut()) {
            *x = 0.5 * rng.normal();
        }
    }
    params
}

fn matrix(g: &Grid) -> [[f64; 4]; 3] {
    let mut m = [[0.0; 4]; 3];
    for (k, &x) in g.data().iter().enumerate() {
        m[k / 4][k % 4] = x;
    }
    m
}

fn delta_grid(d: &[[f64; 4]; 3]) -> Grid {
    flat(d.iter().flatten().copied().collect())
}

fn global_offset_params(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let params = offset_params(&mut rng, DEPTHS[i % DEPTHS.len()]);
    let f = normal(&[IMAGE.0, IMAGE.1, CHANNELS], &mut rng, 1.0);
    let p = Lifting::new(&mut rng, 3)?.p;
    let cotangent = normal(&[12], &mut rng, 1.0);
    let input = flat(params.global.flatten());
    let with = move |t: &Grid| -> Result<CameraOffsetParams<f64>> {
        let mut q = params.clone();
        q.global.unflatten(t.data())?;
        Ok(q)
    };
    let (with2, f2) = (with.clone(), f.clone());
    let op = boxed(
        "global_offset/params",
        move |t| Ok(delta_grid(&predict_global_offset(&f, &p, &with(t)?)?.delta)),
        move |t, g| {
            let q = with2(t)?;
            let out = predict_global_offset(&f2, &p, &q)?;
            Ok(flat(out.backward(&q, &matrix(g))?.0.flatten()))
        },
    );
    Ok(Case { op, input, cotangent })
}

fn global_offset_features(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let params = offset_params(&mut rng, DEPTHS[i % DEPTHS.len()]);
    let input = normal(&[IMAGE.0, IMAGE.1, CHANNELS], &mut rng, 1.0);
    let p = Lifting::new(&mut rng, 3)?.p;
    let cotangent = normal(&[12], &mut rng, 1.0);
    let q = params.clone();
    let op = boxed(
        "global_offset/features",
        move |f| Ok(delta_grid(&predict_global_offset(f, &p, &params)?.delta)),
        move |f, g| Ok(predict_global_offset(f, &p, &q)?.backward(&q, &matrix(g))?.1),
    );
    Ok(Case { op, input, cotangent })
}

fn pixel_offset_params(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let d = DEPTHS[i % DEPTHS.len()];
    let params = offset_params(&mut rng, d);
    let f = normal(&[IMAGE.0, IMAGE.1, CHANNELS], &mut rng, 1.0);
    let cotangent = normal(&[IMAGE.0, IMAGE.1, d, 3], &mut rng, 1.0);
    let input = flat(params.pixel.flatten());
    let with = move |t: &Grid| -> Result<CameraOffsetParams<f64>> {
        let mut q = params.clone();
        q.pixel.unflatten(t.data())?;
        Ok(q)
    };
    let (with2, f2) = (with.clone(), f.clone());
    let op = boxed(
        "pixel_offset/params",
        move |t| Ok(predict_pixel_offsets(&f, &with(t)?)?.values),
        move |t, g| {
            let q = with2(t)?;
            Ok(flat(predict_pixel_offsets(&f2, &q)?.backward(&q, &f2, g, false)?.0.flatten()))
        },
    );
    Ok(Case { op, input, cotangent })
}

fn pixel_offset_features(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let d = DEPTHS[i % DEPTHS.len()];
    let params = offset_params(&mut rng, d);
    let input = normal(&[IMAGE.0, IMAGE.1, CHANNELS], &mut rng, 1.0);
    let cotangent = normal(&[IMAGE.0, IMAGE.1, d, 3], &mut rng, 1.0);
    let q = params.clone();
    let op = boxed(
        "pixel_offset/features",
        move |f| Ok(predict_pixel_offsets(f, &params)?.values),
        move |f, g| Ok(predict_pixel_offsets(f, &q)?.backward(&q, f, g, true)?.1.expect("input gradient")),
    );
    Ok(Case { op, input, cotangent })
}

fn kernel_norm_spatial(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let input = normal(&[3, 3, 3, CHANNELS], &mut rng, 1.5);
    let cotangent = normal(&[3, 3, 3, CHANNELS], &mut rng, 1.0);
    let op = boxed("kernel_norm/spatial", normalize_spatial, |x, g| normalize_spatial_backward(&normalize_spatial(x)?, g));
    Ok(Case { op, input, cotangent })
}

fn kernel_norm_channel(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let input = normal(&[CHANNELS, CHANNELS], &mut rng, 1.5);
    let cotangent = normal(&[CHANNELS, CHANNELS], &mut rng, 1.0);
    let op = boxed("kernel_norm/channel", normalize_channel, |x, g| normalize_channel_backward(&normalize_channel(x)?, g));
    Ok(Case { op, input, cotangent })
}

fn volume(rng: &mut SeededRng) -> Grid {
    Lifting::volume_cotangent(rng)
}

fn depthwise_input(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let k = normalize_spatial(&normal(&[3, 3, 3, CHANNELS], &mut rng, 1.0))?;
    let (input, cotangent) = (volume(&mut rng), volume(&mut rng));
    let k2 = k.clone();
    let op = boxed("depthwise/input", move |x| transposed_depthwise(x, &k), move |_, g| transposed_depthwise_adjoint(g, &k2));
    Ok(Case { op, input, cotangent })
}

fn depthwise_kernel(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let input = normal(&[3, 3, 3, CHANNELS], &mut rng, 1.0);
    let (x, cotangent) = (volume(&mut rng), volume(&mut rng));
    let x2 = x.clone();
    let op = boxed("depthwise/kernel", move |k| transposed_depthwise(&x, k), move |_, g| transposed_depthwise_kernel_grad(&x2, g));
    Ok(Case { op, input, cotangent })
}

fn pointwise_input(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let k = normalize_channel(&normal(&[CHANNELS, CHANNELS], &mut rng, 1.0))?;
    let (input, cotangent) = (volume(&mut rng), volume(&mut rng));
    let k2 = k.clone();
    let op = boxed("pointwise/input", move |x| pointwise(x, &k), move |_, g| pointwise_adjoint(g, &k2));
    Ok(Case { op, input, cotangent })
}

fn pointwise_kernel(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let input = normal(&[CHANNELS, CHANNELS], &mut rng, 1.0);
    let (x, cotangent) = (volume(&mut rng), volume(&mut rng));
    let x2 = x.clone();
    let op = boxed("pointwise/kernel", move |k| pointwise(&x, k), move |_, g| pointwise_kernel_grad(&x2, g));
    Ok(Case { op, input, cotangent })
}

fn stack(rng: &mut SeededRng, stages: usize) -> Result<ConvStack<f64>> {
    let mut s = ConvStack::new(CHANNELS, stages, 1.0);
    let t: Vec<f64> = s.flatten().iter().map(|x| x + rng.normal()).collect();
    s.unflatten(&t)?;
    Ok(s)
}

fn with_logits(s: &ConvStack<f64>, t: &Grid) -> Result<ConvStack<f64>> {
    let mut m = s.clone();
    m.unflatten(t.data())?;
    Ok(m)
}

fn chain_input(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let s = stack(&mut rng, 1 + i % 2)?;
    let (input, cotangent) = (volume(&mut rng), volume(&mut rng));
    let s2 = s.clone();
    let op = boxed("conv_chain/input", move |x| Ok(s.forward(x)?.0), move |x, g| {
        let (_, tr) = s2.forward(x)?;
        Ok(s2.backward(&tr, g)?.1)
    });
    Ok(Case { op, input, cotangent })
}

fn chain_logits(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let s = stack(&mut rng, 1 + i % 2)?;
    let (x, cotangent) = (volume(&mut rng), volume(&mut rng));
    let input = flat(s.flatten());
    let (s2, x2) = (s.clone(), x.clone());
    let op = boxed("conv_chain/logits", move |t| Ok(with_logits(&s, t)?.forward(&x)?.0), move |t, g| {
        let m = with_logits(&s2, t)?;
        let (_, tr) = m.forward(&x2)?;
        Ok(flat(m.backward(&tr, g)?.0.flatten()))
    });
    Ok(Case { op, input, cotangent })
}

fn chain_adjoint_logits(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let s = stack(&mut rng, 1 + i % 2)?;
    let (y, cotangent) = (volume(&mut rng), volume(&mut rng));
    let input = flat(s.flatten());
    let (s2, y2) = (s.clone(), y.clone());
    let op = boxed("conv_chain_adjoint/logits", move |t| Ok(with_logits(&s, t)?.adjoint(&y)?.0), move |t, g| {
        let m = with_logits(&s2, t)?;
        let (_, tr) = m.adjoint(&y2)?;
        Ok(flat(m.adjoint_backward(&tr, g)?.0.flatten()))
    });
    Ok(Case { op, input, cotangent })
}

/// Random class indicator replicated over channels.
fn indicator(rng: &mut SeededRng) -> Grid {
    let [h, w, z] = EXTENT;
    let mask: Vec<bool> = (0..h * w * z).map(|_| rng.uniform() < 0.4).collect();
    DenseGrid::from_fn(&[h, w, z, CHANNELS], |i| if mask[i / CHANNELS] { 1.0 } else { 0.0 })
}

fn map_cotangent(rng: &mut SeededRng) -> Grid {
    normal(&[IMAGE.0, IMAGE.1, CHANNELS], rng, 1.0)
}

fn influence_weights(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let l = Lifting::new(&mut rng, DEPTHS[i % DEPTHS.len()])?;
    let s = stack(&mut rng, 1)?;
    let g0 = volume_influence(&s, &indicator(&mut rng))?;
    let plan = l.plan(&l.offsets, &l.p)?;
    let cotangent = map_cotangent(&mut rng);
    let input = l.w.clone();
    let (plan2, g02) = (plan.clone(), g0.clone());
    let op = boxed("influence/weights", move |w| influence_map(&plan, w, &g0), move |w, g| {
        let mut dg0 = g02.volume.zeros_like();
        Ok(influence_map_backward(&plan2, w, &g02, g, &mut dg0)?.weights)
    });
    Ok(Case { op, input, cotangent })
}

fn influence_offsets(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let l = Lifting::new(&mut rng, DEPTHS[i % DEPTHS.len()])?;
    let s = stack(&mut rng, 1)?;
    let g0 = volume_influence(&s, &indicator(&mut rng))?;
    let cotangent = map_cotangent(&mut rng);
    let input = l.offsets.clone();
    let (l2, g02) = (l.clone(), g0.clone());
    let op = boxed(
        "influence/pixel_offsets",
        move |o| influence_map(&l.plan(o, &l.p)?, &l.w, &g0),
        move |o, g| {
            let plan = l2.plan(o, &l2.p)?;
            let mut dg0 = g02.volume.zeros_like();
            let grads = influence_map_backward(&plan, &l2.w, &g02, g, &mut dg0)?;
            Ok(plan.coords_backward(&grads.coords)?.1.expect("offsets were used"))
        },
    );
    Ok(Case { op, input, cotangent })
}

/// Indicator volume `↦` map; the adjoint runs the chain forward on `∂/∂g₀`.
fn influence_indicator(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let l = Lifting::new(&mut rng, DEPTHS[i % DEPTHS.len()])?;
    let s = stack(&mut rng, 1 + i % 2)?;
    let plan = l.plan(&l.offsets, &l.p)?;
    let input = indicator(&mut rng);
    let cotangent = map_cotangent(&mut rng);
    let (plan2, s2, w2) = (plan.clone(), s.clone(), l.w.clone());
    let op = boxed("influence/indicator", move |y| influence_map(&plan, &l.w, &volume_influence(&s, y)?), move |y, g| {
        let g0 = volume_influence(&s2, y)?;
        let mut dg0 = g0.volume.zeros_like();
        influence_map_backward(&plan2, &w2, &g0, g, &mut dg0)?;
        Ok(s2.forward(&dg0)?.0)
    });
    Ok(Case { op, input, cotangent })
}

fn influence_kernels(seed: u64, i: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let l = Lifting::new(&mut rng, DEPTHS[i % DEPTHS.len()])?;
    let s = stack(&mut rng, 1 + i % 2)?;
    let plan = l.plan(&l.offsets, &l.p)?;
    let ind = indicator(&mut rng);
    let cotangent = map_cotangent(&mut rng);
    let input = flat(s.flatten());
    let (plan2, s2, w2, ind2) = (plan.clone(), s.clone(), l.w.clone(), ind.clone());
    let op = boxed(
        "influence/kernel_logits",
        move |t| influence_map(&plan, &l.w, &volume_influence(&with_logits(&s, t)?, &ind)?),
        move |t, g| {
            let m = with_logits(&s2, t)?;
            let g0 = volume_influence(&m, &ind2)?;
            let mut dg0 = g0.volume.zeros_like();
            influence_map_backward(&plan2, &w2, &g0, g, &mut dg0)?;
            Ok(flat(volume_influence_backward(&m, &g0, &dg0)?.flatten()))
        },
    );
    Ok(Case { op, input, cotangent })
}

fn attention_op(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let input = DenseGrid::from_fn(&[IMAGE.0, IMAGE.1, CHANNELS], |_| rng.uniform());
    let cotangent = normal(&[IMAGE.0, IMAGE.1], &mut rng, 1.0);
    let op = boxed("attention", attention, |_, g| attention_backward(g, CHANNELS));
    Ok(Case { op, input, cotangent })
}

fn bce_op(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    // kept off the clamp, where the loss is flat
    let input = DenseGrid::from_fn(&[IMAGE.0, IMAGE.1], |_| rng.uniform_range(0.05, 0.95));
    let target = DenseGrid::from_fn(&[IMAGE.0, IMAGE.1], |_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 });
    let cotangent = normal(&[1], &mut rng, 1.0);
    let t2 = target.clone();
    let op = boxed("bce", move |a| Ok(flat(vec![bce_loss(a, &target)?])), move |a, g| Ok(bce_grad(a, &t2)?.scale(g.data()[0])));
    Ok(Case { op, input, cotangent })
}

fn decoder(rng: &mut SeededRng) -> Mlp<f64> {
    let mut m = Mlp::init(CHANNELS, HIDDEN, 5, 1.0, rng);
    m.w2 = normal(m.w2.shape(), rng, 1.0);
    m
}

fn decoder_params(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let m = decoder(&mut rng);
    let x = normal(&[3, 3, 2, CHANNELS], &mut rng, 1.0);
    let cotangent = normal(&[3, 3, 2, 5], &mut rng, 1.0);
    let input = flat(m.flatten());
    let with = move |t: &Grid| -> Result<Mlp<f64>> {
        let mut q = m.clone();
        q.unflatten(t.data())?;
        Ok(q)
    };
    let (with2, x2) = (with.clone(), x.clone());
    let op = boxed("decoder/params", move |t| Ok(decode(&x, &with(t)?)?.0), move |t, g| {
        let q = with2(t)?;
        let (_, cache) = decode(&x2, &q)?;
        Ok(flat(cache.backward(&q, &x2, g)?.0.flatten()))
    });
    Ok(Case { op, input, cotangent })
}

fn decoder_features_ce(seed: u64, _: usize) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let m = decoder(&mut rng);
    let input = normal(&[3, 3, 2, CHANNELS], &mut rng, 1.0);
    let labels: Vec<u8> = (0..18).map(|_| rng.below(5) as u8).collect();
    let cotangent = normal(&[1], &mut rng, 1.0);
    let (m2, l2) = (m.clone(), labels.clone());
    let op = boxed(
        "decoder/features+ce",
        move |x| Ok(flat(vec![occupancy_ce(&decode(x, &m)?.0, &labels)?])),
        move |x, g| {
            let (logits, cache) = decode(x, &m2)?;
            let dl = occupancy_ce_grad(&logits, &l2)?.scale(g.data()[0]);
            Ok(cache.backward(&m2, x, &dl)?.1)
        },
    );
    Ok(Case { op, input, cotangent })
}
