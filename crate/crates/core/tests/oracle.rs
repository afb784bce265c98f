use scat_core::lifting::{oracle_class_mass, scl_oracle_geometry, DepthBins, SplatMode, SplatPlan, ViewGeometry};
use scat_core::scene::{generate_scene, SceneConfig};

#[test]
fn oracle_mass_lands_on_the_pixel_class() {
    let cfg = SceneConfig::default();
    let bins = DepthBins::new(1.0, 9.0, 32).unwrap();
    for seed in 0..5 {
        let scene = generate_scene(&cfg, seed, None).unwrap();
        let spec = scene.world.spec;
        for view in &scene.views {
            let image = (view.camera.image[0], view.camera.image[1]);
            let geo = scl_oracle_geometry(&scene.world.labels, &view.labels, image, &view.projection, &bins, &spec).unwrap();
            let geom = ViewGeometry { projection: view.projection, pixel_offsets: None, bins, spec, image };
            let plan = SplatPlan::build(&geom, SplatMode::Nearest).unwrap();
            let mass = oracle_class_mass(&plan, &geo, &scene.world.labels, &view.labels);
            assert!(!mass.is_empty());
            assert!(mass.iter().all(|&m| m >= 0.99), "seed {seed}: {mass:?}");
        }
    }
}
