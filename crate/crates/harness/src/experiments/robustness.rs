//! Calibration-noise sweep with and without the learned camera offsets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::HarnessResult;
use crate::record::{fmt, RunRecord, SeedRun};
use crate::suite::build_suite;
use crate::train::{train_run, Prepared, RunSpec};

pub const OFFSETS: &str = "offsets";
pub const FIXED: &str = "fixed";

/// Signed percentage change from `clean` to `noisy`; a degradation is
/// negative.
pub fn relative_drop(clean: f64, noisy: f64) -> f64 {
    (noisy - clean) / clean * 100.0
}

/// [`relative_drop`], undefined when the clean score is zero.
pub fn checked_drop(clean: f64, noisy: f64) -> Option<f64> {
    (clean > 0.0).then(|| relative_drop(clean, noisy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub sigma: f64,
    pub variant: String,
    pub seed: u64,
    pub miou: f64,
    pub miou_d: f64,
    pub iou: f64,
    /// `None` when the clean run scored zero.
    pub drop_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub matched_sigma: f64,
    pub rows: Vec<RobustnessRow>,
    /// Medians over seeds of the defined `drop_pct` at the matched sigma.
    pub median_drop_offsets: Option<f64>,
    pub median_drop_fixed: Option<f64>,
}

impl RobustnessSummary {
    /// The offsets model loses at most half of what the fixed model loses.
    pub fn offsets_halve_drop(&self) -> bool {
        match (self.median_drop_offsets, self.median_drop_fixed) {
            (Some(o), Some(f)) => f < 0.0 && o.abs() <= 0.5 * f.abs(),
            _ => false,
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains both variants at every sweep sigma (noise in training and
/// evaluation alike) and reports drops against the same variant and seed
/// at sigma 0.
pub fn robustness(cfg: &ExperimentConfig) -> HarnessResult<RunRecord> {
    cfg.validate()?;
    let mut record = RunRecord::new("robustness", cfg);
    let mut rows = Vec::new();
    let mut sigmas = cfg.noise_sigmas.clone();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    for &seed in &cfg.seeds {
        let suite = build_suite(&cfg.scene, cfg.training.train_scenes, cfg.training.eval_scenes, seed)?;
        let data = Prepared::new(&suite, &cfg.model, false)?;
        for (variant, on) in [(OFFSETS, true), (FIXED, false)] {
            let mut model = cfg.model.clone();
            model.global_offset = on;
            model.pixel_offset = on;
            let mut clean = f64::NAN;
            for &sigma in &sigmas {
                let run = RunSpec { model: model.clone(), causal_weight: 0.0, sigma, ..RunSpec::from_config(variant, cfg) };
                let t = train_run(cfg, &data, &run, seed)?;
                let m = &t.metrics;
                if sigma == 0.0 {
                    clean = m.miou;
                }
                let drop_pct = checked_drop(clean, m.miou);
                rows.push(RobustnessRow { sigma, variant: variant.into(), seed, miou: m.miou, miou_d: m.miou_d, iou: m.iou, drop_pct });
                record.runs.push(SeedRun { variant: variant.into(), seed, sigma, trace: t.trace, metrics: t.metrics });
            }
        }
    }
    let drops = |variant: &str| -> Vec<f64> {
        rows.iter().filter(|r| r.variant == variant && r.sigma == cfg.matched_sigma).filter_map(|r| r.drop_pct).collect()
    };
    let summary = RobustnessSummary {
        matched_sigma: cfg.matched_sigma,
        median_drop_offsets: Some(median(&drops(OFFSETS))).filter(|m| !m.is_nan()),
        median_drop_fixed: Some(median(&drops(FIXED))).filter(|m| !m.is_nan()),
        rows,
    };
    record.summary = serde_json::to_value(summary)?;
    Ok(record)
}

pub fn write_table(dir: &Path, rows: &[RobustnessRow]) -> HarnessResult<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("robustness.csv"))?;
    w.write_record(["sigma", "variant", "seed", "miou", "miou_d", "iou", "drop_pct"])?;
    for r in rows {
        w.write_record([fmt(r.sigma), r.variant.clone(), r.seed.to_string(), fmt(r.miou), fmt(r.miou_d), fmt(r.iou), r.drop_pct.map(fmt).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sigma: f64, variant: &str, drop_pct: Option<f64>) -> RobustnessRow {
        RobustnessRow { sigma, variant: variant.into(), seed: 0, miou: 0.5, miou_d: 0.5, iou: 0.5, drop_pct }
    }

    #[test]
    fn published_pairs_round_to_published_drops() {
        let round1 = |x: f64| (x * 10.0).round() / 10.0;
        assert_eq!(round1(relative_drop(37.1, 25.1)), -32.3);
        assert_eq!(round1(relative_drop(40.1, 31.3)), -21.9);
        assert_eq!(relative_drop(40.0, 40.0), 0.0);
        assert_eq!(checked_drop(40.0, 30.0), Some(-25.0));
        assert_eq!(checked_drop(0.0, 0.0), None);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn halving_rule() {
        let s = |o, f| RobustnessSummary { matched_sigma: 0.1, rows: vec![], median_drop_offsets: Some(o), median_drop_fixed: Some(f) };
        assert!(s(-5.0, -20.0).offsets_halve_drop());
        assert!(s(-10.0, -20.0).offsets_halve_drop());
        assert!(!s(-10.5, -20.0).offsets_halve_drop());
        assert!(!s(0.0, 0.0).offsets_halve_drop());
        assert!(s(3.0, -20.0).offsets_halve_drop());
    }

    #[test]
    fn table_has_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        write_table(dir.path(), &[row(0.0, FIXED, Some(0.0)), row(0.1, FIXED, Some(-12.5)), row(0.1, OFFSETS, None)]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("robustness.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("sigma,variant,seed,miou,miou_d,iou,drop_pct"));
        assert_eq!(lines.next(), Some("0.0,fixed,0,0.5,0.5,0.5,0.0"));
        assert_eq!(lines.next(), Some("0.1,fixed,0,0.5,0.5,0.5,-12.5"));
        assert_eq!(lines.next(), Some("0.1,offsets,0,0.5,0.5,0.5,"));
    }
}
