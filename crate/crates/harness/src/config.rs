use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scat_core::optim::AdamWConfig;
use scat_core::pipeline::ModelConfig;
use scat_core::scene::SceneConfig;

use crate::error::{HarnessError, HarnessResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { steps: 2000, batch: 4, train_scenes: 10, eval_scenes: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem1Config {
    /// Coordinate error magnitudes in voxels.
    pub deltas: Vec<f64>,
    /// Training steps for the clean-geometry reference model.
    pub reference_steps: usize,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Theorem1Config { deltas: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0], reference_steps: 300 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub inputs: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Operator whose adjoint is deliberately corrupted (fault fixture).
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { inputs: 10, step: 1e-5, tolerance: 1e-6, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub training: TrainingConfig,
    pub causal_weight: f64,
    /// Camera noise used by `train`.
    pub noise_sigma: f64,
    /// Sweep used by `robustness`; must contain 0.
    pub noise_sigmas: Vec<f64>,
    /// Sweep entry at which the two robustness variants are compared.
    pub matched_sigma: f64,
    pub seeds: Vec<u64>,
    pub theorem1: Theorem1Config,
    pub gradcheck: GradcheckConfig,
    pub estimator_draws: usize,
    /// Not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            training: TrainingConfig::default(),
            causal_weight: 0.02,
            noise_sigma: 0.0,
            noise_sigmas: vec![0.0, 0.01, 0.02],
            matched_sigma: 0.01,
            seeds: vec![0, 1, 2, 3, 4],
            theorem1: Theorem1Config::default(),
            gradcheck: GradcheckConfig::default(),
            estimator_draws: 100_000,
            output_dir: None,
        }
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> HarnessResult<()> {
        self.scene.validate()?;
        self.model.validate(self.scene.channels)?;
        self.optimizer.validate()?;
        let t = &self.training;
        if t.batch == 0 || t.train_scenes == 0 || t.eval_scenes == 0 {
            return Err(bad("batch and scene counts must be positive"));
        }
        if !(self.causal_weight >= 0.0) || !self.causal_weight.is_finite() {
            return Err(bad("causal weight must be finite and ≥ 0"));
        }
        let sigma_ok = |s: f64| s >= 0.0 && s.is_finite();
        if !sigma_ok(self.noise_sigma) || !self.noise_sigmas.iter().all(|&s| sigma_ok(s)) {
            return Err(bad("noise sigmas must be finite and ≥ 0"));
        }
        if !self.noise_sigmas.contains(&0.0) {
            return Err(bad("noise sweep needs a clean (sigma 0) entry"));
        }
        if !(self.matched_sigma > 0.0) || !self.noise_sigmas.contains(&self.matched_sigma) {
            return Err(bad("matched sigma must be a positive entry of the noise sweep"));
        }
        if self.seeds.is_empty() {
            return Err(bad("seed list is empty"));
        }
        if self.theorem1.deltas.is_empty() || self.theorem1.deltas.iter().any(|&d| !(d >= 0.0)) {
            return Err(bad("theorem1 deltas must be non-empty and ≥ 0"));
        }
        let g = &self.gradcheck;
        if g.inputs == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0) {
            return Err(bad("gradcheck needs inputs > 0, step > 0, tolerance > 0"));
        }
        if self.estimator_draws < 2 {
            return Err(bad("estimator needs at least 2 draws"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
