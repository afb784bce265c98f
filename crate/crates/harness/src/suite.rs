//! Seeded scene suites and the per-view inputs handed to the model.

use scat_core::diffcore::{DenseGrid, SeededRng};
use scat_core::geometry::{perturb, CameraPerturbation, ProjectionMatrix};
use scat_core::lifting::{scl_oracle_geometry, DepthBins};
use scat_core::pipeline::{SceneInput, ViewInput};
use scat_core::scene::{class_embeddings, generate_scene, Scene, SceneConfig};

use crate::error::HarnessResult;

/// SplitMix64 over a tuple of stream ids.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Training and evaluation scenes sharing one class-embedding table.
#[derive(Clone, Debug)]
pub struct Suite {
    pub embeddings: DenseGrid<f64>,
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

pub fn build_suite(cfg: &SceneConfig, train: usize, eval: usize, seed: u64) -> HarnessResult<Suite> {
    cfg.validate()?;
    let embeddings = class_embeddings(cfg.classes, cfg.channels, &mut SeededRng::new(mix(&[seed, 0])));
    let make = |split: u64, n: usize| -> HarnessResult<Vec<Scene>> {
        (0..n).map(|k| Ok(generate_scene(cfg, mix(&[seed, split, k as u64]), Some(&embeddings))?)).collect()
    };
    Ok(Suite { train: make(1, train)?, eval: make(2, eval)?, embeddings })
}

/// Oracle depth weights for every view of a scene.
pub fn oracle_geometry(scene: &Scene, bins: &DepthBins<f64>) -> HarnessResult<Vec<DenseGrid<f64>>> {
    let spec = scene.world.spec;
    scene
        .views
        .iter()
        .map(|v| {
            let image = (v.camera.image[0], v.camera.image[1]);
            Ok(scl_oracle_geometry(&scene.world.labels, &v.labels, image, &v.projection, bins, &spec)?)
        })
        .collect()
}

/// Projections as the model sees them: exact, or with calibration noise
/// drawn from `noise_seed`.
pub fn view_projections(scene: &Scene, sigma: f64, noise_seed: u64) -> HarnessResult<Vec<ProjectionMatrix<f64>>> {
    scene
        .views
        .iter()
        .enumerate()
        .map(|(k, v)| Ok(perturb(&v.projection, &CameraPerturbation { sigma, seed: mix(&[noise_seed, k as u64]) })?))
        .collect()
}

pub fn scene_input<'a>(
    scene: &'a Scene,
    projections: &[ProjectionMatrix<f64>],
    geometry: Option<&'a [DenseGrid<f64>]>,
) -> SceneInput<'a, f64> {
    SceneInput {
        views: scene
            .views
            .iter()
            .enumerate()
            .map(|(k, v)| ViewInput {
                features: &v.features,
                projection: projections[k],
                labels: &v.labels,
                geometry: geometry.map(|g| &g[k]),
            })
            .collect(),
        world: &scene.world.labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_separates_streams() {
        assert_ne!(mix(&[1, 2]), mix(&[2, 1]));
        assert_ne!(mix(&[0]), mix(&[0, 0]));
        assert_eq!(mix(&[7, 8, 9]), mix(&[7, 8, 9]));
    }

    #[test]
    fn suites_are_reproducible_and_share_embeddings() {
        let cfg = SceneConfig::default();
        let a = build_suite(&cfg, 2, 1, 5).unwrap();
        let b = build_suite(&cfg, 2, 1, 5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train[0].embeddings, a.eval[0].embeddings);
        assert_ne!(a.train[0].world, a.train[1].world);
    }

    #[test]
    fn zero_noise_keeps_projections() {
        let cfg = SceneConfig::default();
        let s = build_suite(&cfg, 1, 1, 0).unwrap();
        let p = view_projections(&s.train[0], 0.0, 3).unwrap();
        assert_eq!(p[0], s.train[0].views[0].projection);
        let q = view_projections(&s.train[0], 0.1, 3).unwrap();
        assert_ne!(q[0], p[0]);
    }
}
