use std::path::Path;

use serde::{Deserialize, Serialize};

use scat_core::occhead::MetricsReport;

use crate::config::ExperimentConfig;
use crate::error::HarnessResult;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Per-step batch-mean losses of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub occupancy: Vec<f64>,
    /// `None` at steps without a causal term.
    pub causal: Vec<Option<f64>>,
    pub total: Vec<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn push(&mut self, occupancy: f64, causal: Option<f64>, total: f64) {
        self.occupancy.push(occupancy);
        self.causal.push(causal);
        self.total.push(total);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub variant: String,
    pub seed: u64,
    /// Camera noise used in training and evaluation.
    pub sigma: f64,
    pub trace: LossTrace,
    pub metrics: MetricsReport,
}

/// Everything a command produced, minus wall-clock time (kept in
/// `timing.json` so this file is reproducible bit for bit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub artifact_version: String,
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    /// Command-specific tables.
    pub summary: serde_json::Value,
}

impl RunRecord {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        let mut config = config.clone();
        config.output_dir = None;
        RunRecord {
            artifact_version: ARTIFACT_VERSION.to_string(),
            command: command.to_string(),
            config_hash: config.hash(),
            config,
            runs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn run(&self, variant: &str, seed: u64) -> Option<&SeedRun> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Writes `record.json`, `losses.csv` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> HarnessResult<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(dir.join("record.json"), json)?;

        let mut losses = csv::Writer::from_path(dir.join("losses.csv"))?;
        losses.write_record(["variant", "seed", "step", "occupancy", "causal", "total"])?;
        for r in &self.runs {
            for (k, ((o, c), t)) in r.trace.occupancy.iter().zip(&r.trace.causal).zip(&r.trace.total).enumerate() {
                let c = c.map(fmt).unwrap_or_default();
                losses.write_record([r.variant.clone(), r.seed.to_string(), k.to_string(), fmt(*o), c, fmt(*t)])?;
            }
        }
        losses.flush()?;

        let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
        metrics.write_record(["variant", "seed", "sigma", "miou", "miou_d", "iou"])?;
        for r in &self.runs {
            let m = &r.metrics;
            metrics.write_record([r.variant.clone(), r.seed.to_string(), fmt(r.sigma), fmt(m.miou), fmt(m.miou_d), fmt(m.iou)])?;
        }
        metrics.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> HarnessResult<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("record.json"))?)?)
    }
}

/// Shortest round-trip decimal form with a '.' separator.
pub fn fmt(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_timing(dir: &Path, seconds: f64) -> HarnessResult<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&serde_json::json!({ "wall_clock_s": seconds }))?)?;
    Ok(())
}
