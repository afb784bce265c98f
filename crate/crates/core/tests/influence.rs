mod common;

use common::{input, model, model_with, small_config, small_scene};
use scat_core::causal::{classes_present, indicator, influence_map, volume_influence};
use scat_core::diffcore::{DenseGrid, SeededRng};
use scat_core::geometry::{ProjectionMatrix, VoxelGridSpec};
use scat_core::lifting::{DepthBins, SplatMode, SplatPlan, ViewGeometry};
use scat_core::normconv::{ConvStack, KernelNorm};
use scat_core::pipeline::{ModelConfig, ScatModel, SceneInput, ViewInput};
use scat_core::scene::Scene;

/// Central differences of `Σ_{x∈Ω_s, c'} chain(lift(f))` in each `f(u,v,c)`,
/// with the plan and depth weights held fixed.
fn brute_force_map(m: &ScatModel<f64>, view: &ViewInput<'_, f64>, world: &[u8], s: u8) -> DenseGrid<f64> {
    let (plan, weights) = m.view_plan(view).unwrap();
    let [h, w, z] = m.spec.extent;
    let c = m.channels();
    let objective = |f: &DenseGrid<f64>| {
        let mut vol = DenseGrid::zeros(&[h, w, z, c]);
        plan.deposit(f, &weights, &mut vol).unwrap();
        let (out, _) = m.convs.forward(&vol).unwrap();
        out.data().chunks_exact(c).zip(world).filter(|(_, &l)| l == s).map(|(px, _)| px.iter().sum::<f64>()).sum::<f64>()
    };
    let f0 = view.features.clone();
    let mut probe = f0.clone();
    let step = 0.5;
    DenseGrid::from_fn(f0.shape(), |i| {
        let x = f0.data()[i];
        probe.data_mut()[i] = x + step;
        let p = objective(&probe);
        probe.data_mut()[i] = x - step;
        let q = objective(&probe);
        probe.data_mut()[i] = x;
        (p - q) / (2.0 * step)
    })
}

fn rel_err(a: &DenseGrid<f64>, b: &DenseGrid<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / y.abs().max(1e-8)).fold(0.0, f64::max)
}

#[test]
fn adjoint_pass_matches_brute_force_jacobian() {
    for seed in 0..2 {
        let scene = small_scene(seed);
        let cfg = ModelConfig { conv_stages: 2, ..small_config(SplatMode::Soft) };
        let m = model_with(&scene, cfg, 40 + seed);
        let inp = input(&scene);
        for s in classes_present(&scene.world.labels) {
            let maps = m.influence_maps(&inp, s).unwrap();
            for (view, map) in inp.views.iter().zip(&maps) {
                let want = brute_force_map(&m, view, inp.world, s);
                assert!(want.max_abs() > 0.0);
                let e = rel_err(map, &want);
                assert!(e <= 1e-6, "seed {seed} class {s}: rel err {e:e}");
            }
        }
    }
}

#[test]
fn influence_partitions_over_classes() {
    for seed in 0..3 {
        let scene = small_scene(seed);
        let m = model(&scene, SplatMode::Soft, 20 + seed);
        let inp = input(&scene);
        let all_world = vec![0u8; scene.world.labels.len()];
        let all = m.influence_maps(&SceneInput { views: inp.views.clone(), world: &all_world }, 0).unwrap();
        let mut sum: Vec<DenseGrid<f64>> = all.iter().map(|g| g.zeros_like()).collect();
        for s in 0..=3u8 {
            for (acc, g) in sum.iter_mut().zip(m.influence_maps(&inp, s).unwrap()) {
                acc.add_assign(&g).unwrap();
            }
        }
        for (a, b) in sum.iter().zip(&all) {
            assert!(a.max_abs_diff(b).unwrap() <= 1e-10);
        }
    }
}

fn map_range(scene: &Scene, m: &ScatModel<f64>) -> (f64, f64) {
    let inp = input(scene);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in classes_present(&scene.world.labels) {
        for g in m.influence_maps(&inp, s).unwrap() {
            for &x in g.data() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    (lo, hi)
}

#[test]
fn influence_stays_in_unit_range() {
    for seed in 0..3 {
        let scene = small_scene(seed);
        let m = model_with(&scene, ModelConfig { conv_stages: 2, ..small_config(SplatMode::Soft) }, 30 + seed);
        let (lo, hi) = map_range(&scene, &m);
        assert!(lo >= 0.0 && hi <= 1.0 + 1e-9, "seed {seed}: [{lo}, {hi}]");
    }
}

#[test]
fn unnormalized_kernels_break_the_range() {
    let scene = small_scene(0);
    let mut m = model(&scene, SplatMode::Soft, 20);
    m.convs.norm = KernelNorm::Unnormalized;
    let (_, hi) = map_range(&scene, &m);
    assert!(hi > 1.0 + 1e-9, "max {hi}");
}

#[test]
fn all_grid_map_is_one_without_exiting_mass() {
    let spec = VoxelGridSpec::<f64>::unit([6, 6, 6]);
    // every hypothesis lands in [1.2, 3.0]² × [1.6, 2.6], so neither the
    // splat taps nor one 3³ stage reach past the border
    let p = ProjectionMatrix::new([[0.2, 0.0, 0.0, 1.2], [0.0, 0.2, 0.0, 1.2], [0.0, 0.0, 0.5, 1.1]]).unwrap();
    let bins = DepthBins::new(1.0, 3.0, 3).unwrap();
    let mut rng = SeededRng::new(5);
    let (c, groups) = (8, 2);
    let offsets = DenseGrid::from_fn(&[4, 4, 3, 3], |i| if i % 3 == 2 { 0.0 } else { 0.2 * rng.uniform_range(-1.0, 1.0) });
    let geom = ViewGeometry { projection: p, pixel_offsets: Some(&offsets), bins, spec, image: (4, 4) };
    let plan = SplatPlan::build(&geom, SplatMode::Soft).unwrap();
    let mut weights = DenseGrid::from_fn(&[4, 4, groups, 3], |_| rng.uniform() + 0.05);
    for row in weights.data_mut().chunks_exact_mut(3) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= z);
    }
    let mut stack = ConvStack::<f64>::new(c, 1, 4.0);
    let flat: Vec<f64> = stack.flatten().iter().map(|x| x + rng.normal()).collect();
    stack.unflatten(&flat).unwrap();
    let ind = indicator::<f64>(&vec![0u8; 216], [6, 6, 6], 0, c).unwrap();
    let g0 = volume_influence(&stack, &ind).unwrap();
    let map = influence_map(&plan, &weights, &g0).unwrap();
    assert!(map.data().iter().all(|&x| (x - 1.0).abs() <= 1e-10), "{:?}", map.data());
}
