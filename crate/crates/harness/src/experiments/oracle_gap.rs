//! Learned depth weights against the semantic oracle, same decoder budget.

use serde::{Deserialize, Serialize};

use scat_core::lifting::SplatMode;
use scat_core::pipeline::ModelConfig;

use crate::config::ExperimentConfig;
use crate::error::HarnessResult;
use crate::experiments::robustness::median;
use crate::record::{RunRecord, SeedRun};
use crate::suite::build_suite;
use crate::train::{train_run, Geometry, Prepared, RunSpec};

pub const LEARNED: &str = "learned";
pub const ORACLE: &str = "oracle";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub seed: u64,
    pub miou_learned: f64,
    pub miou_oracle: f64,
    /// In mIoU points.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub rows: Vec<GapRow>,
    pub median_gap: f64,
}

impl GapSummary {
    pub fn oracle_wins_every_seed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.gap > 0.0)
    }
}

/// The plain depth-distribution lift both variants share: one group,
/// nearest rounding, no offset heads.
pub fn plain_lift(model: &ModelConfig) -> ModelConfig {
    ModelConfig { groups: 1, splat: SplatMode::Nearest, global_offset: false, pixel_offset: false, ..model.clone() }
}

pub fn oracle_gap(cfg: &ExperimentConfig) -> HarnessResult<RunRecord> {
    oracle_gap_with(cfg, Geometry::Oracle)
}

/// As [`oracle_gap`], with the second variant's geometry chosen by the
/// caller; `Geometry::Learned` gives two identical runs.
pub fn oracle_gap_with(cfg: &ExperimentConfig, second: Geometry) -> HarnessResult<RunRecord> {
    cfg.validate()?;
    let mut record = RunRecord::new("oracle-gap", cfg);
    let model = plain_lift(&cfg.model);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let suite = build_suite(&cfg.scene, cfg.training.train_scenes, cfg.training.eval_scenes, seed)?;
        let data = Prepared::new(&suite, &model, second == Geometry::Oracle)?;
        let mut miou = [0.0; 2];
        for (k, (variant, geometry)) in [(LEARNED, Geometry::Learned), (ORACLE, second)].into_iter().enumerate() {
            let run = RunSpec { model: model.clone(), causal_weight: 0.0, geometry, ..RunSpec::from_config(variant, cfg) };
            let t = train_run(cfg, &data, &run, seed)?;
            miou[k] = t.metrics.miou;
            record.runs.push(SeedRun { variant: variant.into(), seed, sigma: run.sigma, trace: t.trace, metrics: t.metrics });
        }
        rows.push(GapRow { seed, miou_learned: miou[0], miou_oracle: miou[1], gap: 100.0 * (miou[1] - miou[0]) });
    }
    let median_gap = median(&rows.iter().map(|r| r.gap).collect::<Vec<_>>());
    record.summary = serde_json::to_value(GapSummary { rows, median_gap })?;
    Ok(record)
}
