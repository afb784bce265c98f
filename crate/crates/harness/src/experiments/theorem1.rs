//! Feature and gradient deviation under injected mapping error, and the
//! coordinate gradients of nearest against soft filling.

use serde::{Deserialize, Serialize};

use scat_core::diffcore::SeededRng;
use scat_core::geometry::ProjectionMatrix;
use scat_core::lifting::SplatMode;
use scat_core::pipeline::{ModelConfig, ScatModel};

use crate::config::ExperimentConfig;
use crate::error::HarnessResult;
use crate::experiments::robustness::median;
use crate::record::{RunRecord, SeedRun};
use crate::suite::{build_suite, mix, scene_input, Suite};
use crate::train::{train_run, Prepared, RunSpec};

const DIRECTION: u64 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub seed: u64,
    /// Injected coordinate error in voxels.
    pub delta: f64,
    pub feature_deviation: f64,
    pub gradient_deviation: f64,
    /// Largest `|∂L/∂P|` entry with nearest rounding and soft filling.
    pub nearest_coord_grad: f64,
    pub soft_coord_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Summary {
    pub deltas: Vec<f64>,
    pub rows: Vec<DeviationRow>,
    pub median_feature: Vec<f64>,
    pub median_gradient: Vec<f64>,
}

impl Theorem1Summary {
    pub fn zero_at_origin(&self) -> bool {
        self.rows.iter().filter(|r| r.delta == 0.0).all(|r| r.feature_deviation == 0.0 && r.gradient_deviation == 0.0)
    }

    pub fn monotone(&self) -> bool {
        let up = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
        up(&self.median_feature) && up(&self.median_gradient)
    }

    /// Nearest rounding gives exactly zero, soft filling gives nonzero
    /// coordinate gradients, at every probed point.
    pub fn learnability_contrast(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.nearest_coord_grad == 0.0 && r.soft_coord_grad > 0.0)
    }
}

/// Reference lift: soft filling on the exact mapping, no offset heads.
pub fn reference_lift(model: &ModelConfig) -> ModelConfig {
    ModelConfig { splat: SplatMode::Soft, global_offset: false, pixel_offset: false, ..model.clone() }
}

fn unit_direction(seed: u64) -> [f64; 3] {
    let mut rng = SeededRng::new(mix(&[seed, DIRECTION]));
    loop {
        let d = [rng.normal(), rng.normal(), rng.normal()];
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return d.map(|x| x / n);
        }
    }
}

/// Shifts every mapped point by `shift` world units.
fn shifted(p: &ProjectionMatrix<f64>, shift: [f64; 3]) -> HarnessResult<ProjectionMatrix<f64>> {
    let mut e = *p.entries();
    for (row, s) in e.iter_mut().zip(shift) {
        row[3] += s;
    }
    Ok(ProjectionMatrix::new(e)?)
}

struct Probe {
    lifted: Vec<f64>,
    grads: Vec<f64>,
    coord_grad: f64,
}

fn probe(model: &ScatModel<f64>, suite: &Suite, batch: usize, shift: [f64; 3]) -> HarnessResult<Probe> {
    let mut out = Probe { lifted: Vec::new(), grads: vec![0.0; model.flatten().len()], coord_grad: 0.0 };
    for scene in suite.train.iter().take(batch) {
        let projections: Vec<_> = scene.views.iter().map(|v| shifted(&v.projection, shift)).collect::<HarnessResult<_>>()?;
        let e = model.evaluate(&scene_input(scene, &projections, None), None, true)?;
        out.lifted.extend_from_slice(e.lifted.data());
        for (acc, g) in out.grads.iter_mut().zip(e.grads.expect("gradients requested").flatten()) {
            *acc += g;
        }
        for p in &e.coord_grads {
            out.coord_grad = p.iter().flatten().fold(out.coord_grad, |m, g| m.max(g.abs()));
        }
    }
    Ok(out)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn theorem1(cfg: &ExperimentConfig) -> HarnessResult<RunRecord> {
    cfg.validate()?;
    let mut record = RunRecord::new("theorem1", cfg);
    let deltas = cfg.theorem1.deltas.clone();
    let batch = cfg.training.batch.min(cfg.training.train_scenes);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let suite = build_suite(&cfg.scene, cfg.training.train_scenes, cfg.training.eval_scenes, seed)?;
        let data = Prepared::new(&suite, &cfg.model, false)?;
        let run = RunSpec {
            model: reference_lift(&cfg.model),
            causal_weight: 0.0,
            sigma: 0.0,
            steps: cfg.theorem1.reference_steps,
            ..RunSpec::from_config("reference", cfg)
        };
        let t = train_run(cfg, &data, &run, seed)?;
        let soft = t.model.clone();
        let mut nearest = t.model.clone();
        nearest.config.splat = SplatMode::Nearest;
        record.runs.push(SeedRun { variant: run.variant, seed, sigma: 0.0, trace: t.trace, metrics: t.metrics });

        let dir = unit_direction(seed);
        let ideal = probe(&soft, &suite, batch, [0.0; 3])?;
        for &delta in &deltas {
            let shift = dir.map(|x| x * delta * cfg.scene.voxel_size);
            let s = probe(&soft, &suite, batch, shift)?;
            let n = probe(&nearest, &suite, batch, shift)?;
            rows.push(DeviationRow {
                seed,
                delta,
                feature_deviation: distance(&s.lifted, &ideal.lifted),
                gradient_deviation: distance(&s.grads, &ideal.grads),
                nearest_coord_grad: n.coord_grad,
                soft_coord_grad: s.coord_grad,
            });
        }
    }
    let curve = |f: fn(&DeviationRow) -> f64| -> Vec<f64> {
        deltas.iter().map(|&d| median(&rows.iter().filter(|r| r.delta == d).map(f).collect::<Vec<_>>())).collect()
    };
    let summary = Theorem1Summary {
        median_feature: curve(|r| r.feature_deviation),
        median_gradient: curve(|r| r.gradient_deviation),
        deltas,
        rows,
    };
    record.summary = serde_json::to_value(summary)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_are_unit() {
        for s in 0..5 {
            let d = unit_direction(s);
            assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_moves_translation_only() {
        let p = ProjectionMatrix::new([[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 2.0], [0.0, 0.0, 1.0, 3.0]]).unwrap();
        let q = *shifted(&p, [0.5, -1.0, 0.25]).unwrap().entries();
        assert_eq!(q[0], [1.0, 0.0, 0.0, 1.5]);
        assert_eq!(q[1], [0.0, 1.0, 0.0, 1.0]);
        assert_eq!(q[2], [0.0, 0.0, 1.0, 3.25]);
    }
}
