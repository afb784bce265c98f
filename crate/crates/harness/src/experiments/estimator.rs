//! Monte Carlo check of the single-class causal-loss estimator.

use serde::{Deserialize, Serialize};

use scat_core::causal::{causal_loss, classes_present, exact_expected_loss};
use scat_core::diffcore::SeededRng;
use scat_core::pipeline::CausalTerm;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, HarnessResult};
use crate::suite::{build_suite, mix, scene_input, view_projections};
use crate::train::init_model;

const DRAWS: u64 = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub seed: u64,
    pub pool: Vec<u8>,
    pub per_class: Vec<f64>,
    pub exact: f64,
    pub mean: f64,
    pub std_error: f64,
    pub counts: Vec<u64>,
    /// Largest `|count − n/|pool|| / sqrt(n p (1 − p))` over the pool.
    pub max_count_z: f64,
}

impl EstimatorRow {
    pub fn mean_within(&self, k: f64) -> bool {
        (self.mean - self.exact).abs() <= k * self.std_error
    }

    pub fn uniform_within(&self, k: f64) -> bool {
        self.max_count_z <= k
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-class z-scores of the draw counts against a uniform pool.
pub fn count_z(counts: &[u64]) -> Vec<f64> {
    let n: u64 = counts.iter().sum();
    let p = 1.0 / counts.len() as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    counts.iter().map(|&c| if sd > 0.0 { (c as f64 - n as f64 * p).abs() / sd } else { 0.0 }).collect()
}

/// Evaluates the exact causal loss of every present class on the first
/// training scene (fresh initialization), then draws the estimator
/// `estimator_draws` times.
pub fn estimator_rows(cfg: &ExperimentConfig) -> HarnessResult<Vec<EstimatorRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let suite = build_suite(&cfg.scene, 1, 1, seed)?;
        let scene = &suite.train[0];
        let model = init_model(cfg, &cfg.model, seed)?;
        let projections = view_projections(scene, 0.0, 0)?;
        let input = scene_input(scene, &projections, None);
        let pool = classes_present(&scene.world.labels);
        let per_class = pool
            .iter()
            .map(|&class| {
                let e = model.evaluate(&input, Some(CausalTerm { weight: 1.0, class }), false)?;
                Ok(e.causal.expect("causal term requested"))
            })
            .collect::<HarnessResult<Vec<f64>>>()?;
        let lookup = |s: u8| Ok(per_class[pool.iter().position(|&p| p == s).expect("class drawn from pool")]);
        let exact = exact_expected_loss(&pool, lookup)?;

        let mut rng = SeededRng::new(mix(&[seed, DRAWS]));
        let mut counts = vec![0u64; pool.len()];
        let mut samples = Vec::with_capacity(cfg.estimator_draws);
        for _ in 0..cfg.estimator_draws {
            let (loss, s) = causal_loss(&mut rng, &pool, lookup)?;
            counts[pool.iter().position(|&p| p == s).expect("class drawn from pool")] += 1;
            samples.push(loss);
        }
        let (mean, std_error) = mean_and_se(&samples);
        if !mean.is_finite() {
            return Err(HarnessError::CheckFailed("estimator mean is not finite".into()));
        }
        let max_count_z = count_z(&counts).into_iter().fold(0.0, f64::max);
        rows.push(EstimatorRow { seed, pool, per_class, exact, mean, std_error, counts, max_count_z });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_of_known_sample() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, n = 4
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn balanced_counts_have_zero_z() {
        assert_eq!(count_z(&[10, 10, 10]), vec![0.0, 0.0, 0.0]);
        let z = count_z(&[40, 60]);
        // n = 100, p = 1/2: sd = 5
        assert!((z[0] - 2.0).abs() < 1e-12 && (z[1] - 2.0).abs() < 1e-12);
    }
}
