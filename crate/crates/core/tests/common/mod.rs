#![allow(dead_code)]

use scat_core::diffcore::SeededRng;
use scat_core::lifting::SplatMode;
use scat_core::pipeline::{ModelConfig, ScatModel, SceneInput, ViewInput};
use scat_core::scene::{generate_scene, BoxCounts, RigConfig, Scene, SceneConfig};

/// 4×4 pixels per view over a 6³ grid, with boxes large enough that every
/// class is seen by some pixel.
pub fn small_scene(seed: u64) -> Scene {
    let cfg = SceneConfig {
        extent: [6, 6, 6],
        classes: 3,
        boxes_per_class: BoxCounts::Uniform(2),
        box_size: [3, 4],
        empty_fraction: [0.2, 0.95],
        rig: RigConfig { image: [4, 4], fov_deg: 36.0, ..RigConfig::default() },
        ..SceneConfig::default()
    };
    generate_scene(&cfg, seed, None).unwrap()
}

pub fn small_config(splat: SplatMode) -> ModelConfig {
    ModelConfig { depth_bins: 3, depth_range: [3.5, 7.5], hidden: 4, splat, ..ModelConfig::default() }
}

/// A model whose parameters are all nonzero.
pub fn model_with(scene: &Scene, cfg: ModelConfig, seed: u64) -> ScatModel<f64> {
    let mut rng = SeededRng::new(seed);
    let mut m = ScatModel::new(cfg, scene.world.spec, 8, 3, &mut rng).unwrap();
    let mut flat = m.flatten();
    for x in flat.iter_mut() {
        *x += 0.1 * rng.normal();
    }
    m.unflatten(&flat).unwrap();
    m
}

pub fn model(scene: &Scene, splat: SplatMode, seed: u64) -> ScatModel<f64> {
    model_with(scene, small_config(splat), seed)
}

pub fn input(scene: &Scene) -> SceneInput<'_, f64> {
    SceneInput {
        views: scene
            .views
            .iter()
            .map(|v| ViewInput { features: &v.features, projection: v.projection, labels: &v.labels, geometry: None })
            .collect(),
        world: &scene.world.labels,
    }
}
