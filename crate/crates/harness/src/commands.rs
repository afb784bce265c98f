//! The CLI subcommands as library calls: each runs, writes its artifacts
//! into an output directory and returns the record.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use scat_core::scene::write_bundle;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, HarnessResult};
use crate::experiments::{compare, estimator, oracle_gap, robustness, theorem1};
use crate::gradcheck::run_gradcheck;
use crate::record::{write_timing, RunRecord};
use crate::suite::build_suite;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenScenes,
    Gradcheck,
    Train,
    CompareCausal,
    Robustness,
    Theorem1,
    OracleGap,
    EstimatorTest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenScenes => "gen-scenes",
            Command::Gradcheck => "gradcheck",
            Command::Train => "train",
            Command::CompareCausal => "compare-causal",
            Command::Robustness => "robustness",
            Command::Theorem1 => "theorem1",
            Command::OracleGap => "oracle-gap",
            Command::EstimatorTest => "estimator-test",
        }
    }
}

/// z-score bound for the estimator's mean and class counts.
pub const ESTIMATOR_Z: f64 = 3.0;

/// Runs `cmd` and writes `record.json`, `losses.csv`, `metrics.csv`,
/// `timing.json` and any command-specific files into `out`. Records are
/// written before a failed check is reported.
pub fn execute(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> HarnessResult<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut failure = None;
    let record = match cmd {
        Command::GenScenes => gen_scenes(cfg, out)?,
        Command::Gradcheck => {
            let seed = cfg.seeds[0];
            let report = run_gradcheck(&cfg.gradcheck, seed)?;
            if let Some(bad) = report.failures().first() {
                failure = Some(format!(
                    "gradcheck: {} failed, relative error {:e} at input {} element {} (analytic {:e}, numeric {:e})",
                    bad.name, bad.max_rel_error, bad.worst_input, bad.worst_index, bad.analytic, bad.numeric
                ));
            }
            let mut r = RunRecord::new(cmd.name(), cfg);
            r.summary = serde_json::to_value(report)?;
            r
        }
        Command::Train => compare::train(cfg)?,
        Command::CompareCausal => compare::compare_causal(cfg)?,
        Command::Robustness => {
            let r = robustness::robustness(cfg)?;
            let s: robustness::RobustnessSummary = serde_json::from_value(r.summary.clone())?;
            robustness::write_table(out, &s.rows)?;
            r
        }
        Command::Theorem1 => theorem1::theorem1(cfg)?,
        Command::OracleGap => oracle_gap::oracle_gap(cfg)?,
        Command::EstimatorTest => {
            let rows = estimator::estimator_rows(cfg)?;
            if let Some(bad) = rows.iter().find(|r| !r.mean_within(ESTIMATOR_Z) || !r.uniform_within(ESTIMATOR_Z)) {
                failure = Some(format!(
                    "estimator-test: seed {} mean {} vs exact {} (se {}), max count z {}",
                    bad.seed, bad.mean, bad.exact, bad.std_error, bad.max_count_z
                ));
            }
            let mut r = RunRecord::new(cmd.name(), cfg);
            r.summary = serde_json::to_value(rows)?;
            r
        }
    };
    record.write(out)?;
    write_timing(out, start.elapsed().as_secs_f64())?;
    match failure {
        Some(msg) => Err(HarnessError::CheckFailed(msg)),
        None => Ok(record),
    }
}

/// Writes every train and eval scene of each seed's suite as a bundle.
fn gen_scenes(cfg: &ExperimentConfig, out: &Path) -> HarnessResult<RunRecord> {
    let dir = out.join("scenes");
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let suite = build_suite(&cfg.scene, cfg.training.train_scenes, cfg.training.eval_scenes, seed)?;
        for (split, scenes) in [("train", &suite.train), ("eval", &suite.eval)] {
            for (k, scene) in scenes.iter().enumerate() {
                let name = format!("seed{seed}_{split}{k:02}.scat");
                write_bundle(&dir.join(&name), scene)?;
                files.push(name);
            }
        }
    }
    let mut r = RunRecord::new(Command::GenScenes.name(), cfg);
    r.summary = serde_json::json!({ "scenes": files });
    Ok(r)
}
