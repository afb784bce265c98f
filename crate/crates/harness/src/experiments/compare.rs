//! Plain training runs and the paired with/without causal-loss comparison.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::HarnessResult;
use crate::record::{RunRecord, SeedRun};
use crate::suite::build_suite;
use crate::train::{eval_occupancy, train_run, Prepared, RunSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub eval_occupancy: f64,
}

pub fn train(cfg: &ExperimentConfig) -> HarnessResult<RunRecord> {
    cfg.validate()?;
    let mut record = RunRecord::new("train", cfg);
    let mut summary = Vec::new();
    for &seed in &cfg.seeds {
        let suite = build_suite(&cfg.scene, cfg.training.train_scenes, cfg.training.eval_scenes, seed)?;
        let data = Prepared::new(&suite, &cfg.model, false)?;
        let run = RunSpec::from_config("train", cfg);
        let t = train_run(cfg, &data, &run, seed)?;
        summary.push(TrainSummary {
            seed,
            initial_loss: t.trace.occupancy.first().copied(),
            final_loss: t.trace.occupancy.last().copied(),
            eval_occupancy: eval_occupancy(&t.model, &data, &run, seed)?,
        });
        record.runs.push(SeedRun { variant: run.variant, seed, sigma: run.sigma, trace: t.trace, metrics: t.metrics });
    }
    record.summary = serde_json::to_value(summary)?;
    Ok(record)
}

/// Steps averaged into the final training loss.
pub const FINAL_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSeed {
    pub seed: u64,
    /// Training occupancy loss over the last [`FINAL_WINDOW`] steps; both
    /// runs see the same batches.
    pub final_baseline: f64,
    pub final_causal: f64,
    /// Occupancy loss on the held-out scenes after training.
    pub held_out_baseline: f64,
    pub held_out_causal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub causal_weight: f64,
    pub seeds: Vec<PairedSeed>,
    /// Seed-mean occupancy traces.
    pub mean_baseline: Vec<f64>,
    pub mean_causal: Vec<f64>,
    /// `mean_causal − mean_baseline`, step by step.
    pub gap: Vec<f64>,
    /// Means over the last quarter of the steps.
    pub tail_baseline: f64,
    pub tail_causal: f64,
    pub seeds_not_worse: usize,
}

pub const BASELINE: &str = "baseline";
pub const CAUSAL: &str = "causal";

/// Runs each seed twice from the same initialization and batch order,
/// once without the causal term and once with `cfg.causal_weight`.
pub fn compare_causal(cfg: &ExperimentConfig) -> HarnessResult<RunRecord> {
    cfg.validate()?;
    let mut record = RunRecord::new("compare-causal", cfg);
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let suite = build_suite(&cfg.scene, cfg.training.train_scenes, cfg.training.eval_scenes, seed)?;
        let data = Prepared::new(&suite, &cfg.model, false)?;
        let (mut finals, mut held_out) = ([0.0; 2], [0.0; 2]);
        for (k, (variant, weight)) in [(BASELINE, 0.0), (CAUSAL, cfg.causal_weight)].into_iter().enumerate() {
            let run = RunSpec { causal_weight: weight, ..RunSpec::from_config(variant, cfg) };
            let t = train_run(cfg, &data, &run, seed)?;
            finals[k] = window_mean(&t.trace.occupancy, FINAL_WINDOW);
            held_out[k] = eval_occupancy(&t.model, &data, &run, seed)?;
            record.runs.push(SeedRun { variant: variant.into(), seed, sigma: run.sigma, trace: t.trace, metrics: t.metrics });
        }
        seeds.push(PairedSeed {
            seed,
            final_baseline: finals[0],
            final_causal: finals[1],
            held_out_baseline: held_out[0],
            held_out_causal: held_out[1],
        });
    }

    let mean_trace = |variant: &str| -> Vec<f64> {
        let runs: Vec<_> = record.runs.iter().filter(|r| r.variant == variant).collect();
        let n = runs.first().map_or(0, |r| r.trace.len());
        (0..n).map(|s| runs.iter().map(|r| r.trace.occupancy[s]).sum::<f64>() / runs.len() as f64).collect()
    };
    let (mean_baseline, mean_causal) = (mean_trace(BASELINE), mean_trace(CAUSAL));
    let gap = mean_causal.iter().zip(&mean_baseline).map(|(c, b)| c - b).collect();
    let summary = CompareSummary {
        causal_weight: cfg.causal_weight,
        seeds_not_worse: seeds.iter().filter(|s| s.final_causal <= s.final_baseline).count(),
        seeds,
        tail_baseline: tail_mean(&mean_baseline),
        tail_causal: tail_mean(&mean_causal),
        mean_baseline,
        mean_causal,
        gap,
    };
    record.summary = serde_json::to_value(summary)?;
    Ok(record)
}

/// Mean over the last quarter (at least one element) of `trace`.
pub fn tail_mean(trace: &[f64]) -> f64 {
    window_mean(trace, (trace.len() / 4).max(1))
}

/// Mean of the last `n` elements (all of them if fewer).
pub fn window_mean(trace: &[f64], n: usize) -> f64 {
    if trace.is_empty() {
        return f64::NAN;
    }
    let n = n.clamp(1, trace.len());
    trace[trace.len() - n..].iter().sum::<f64>() / n as f64
}
