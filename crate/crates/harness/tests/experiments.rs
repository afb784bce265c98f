use scat_harness::experiments::compare::{compare_causal, train, CompareSummary, TrainSummary};
use scat_harness::experiments::oracle_gap::{oracle_gap_with, GapSummary, LEARNED, ORACLE};
use scat_harness::experiments::theorem1::{theorem1, Theorem1Summary};
use scat_harness::suite::build_suite;
use scat_harness::train::{evaluate_model, init_model, Geometry, Prepared, RunSpec};
use scat_harness::ExperimentConfig;

fn tiny(steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.training.steps = steps;
    cfg.training.train_scenes = 3;
    cfg.training.eval_scenes = 2;
    cfg.training.batch = 2;
    cfg.seeds = vec![4];
    cfg
}

#[test]
fn zero_steps_reports_the_initial_model() {
    let cfg = tiny(0);
    let rec = train(&cfg).unwrap();
    let run = &rec.runs[0];
    assert!(run.trace.is_empty());
    let suite = build_suite(&cfg.scene, 3, 2, 4).unwrap();
    let data = Prepared::new(&suite, &cfg.model, false).unwrap();
    let model = init_model(&cfg, &cfg.model, 4).unwrap();
    let want = evaluate_model(&model, &data, &RunSpec::from_config("train", &cfg), 4).unwrap();
    assert_eq!(run.metrics, want);
}

#[test]
fn default_training_reduces_the_loss() {
    let cfg = ExperimentConfig { seeds: vec![0], ..ExperimentConfig::default() };
    let rec = train(&cfg).unwrap();
    let s: Vec<TrainSummary> = serde_json::from_value(rec.summary).unwrap();
    let trace = &rec.runs[0].trace.occupancy;
    assert_eq!(trace.len(), 2000);
    let head = trace[..50].iter().sum::<f64>() / 50.0;
    let tail = trace[trace.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "{head} -> {tail}");
    assert!(s[0].final_loss.unwrap() < s[0].initial_loss.unwrap());
}

#[test]
fn zero_weight_pair_has_zero_gap() {
    let cfg = ExperimentConfig { causal_weight: 0.0, ..tiny(8) };
    let s: CompareSummary = serde_json::from_value(compare_causal(&cfg).unwrap().summary).unwrap();
    assert_eq!(s.gap.len(), 8);
    assert!(s.gap.iter().all(|&g| g == 0.0));
    assert_eq!(s.seeds[0].final_baseline, s.seeds[0].final_causal);
}

#[test]
fn causal_runs_record_the_causal_trace() {
    let rec = compare_causal(&tiny(4)).unwrap();
    let base = rec.run("baseline", 4).unwrap();
    let causal = rec.run("causal", 4).unwrap();
    assert!(base.trace.causal.iter().all(Option::is_none));
    assert!(causal.trace.causal.iter().all(|c| c.is_some_and(|v| v > 0.0)));
}

#[test]
fn identical_geometry_gives_no_gap() {
    let s: GapSummary = serde_json::from_value(oracle_gap_with(&tiny(10), Geometry::Learned).unwrap().summary).unwrap();
    assert_eq!(s.rows[0].gap, 0.0);
    assert_eq!(s.median_gap, 0.0);
}

#[test]
fn oracle_variant_differs_from_learned() {
    let rec = oracle_gap_with(&tiny(10), Geometry::Oracle).unwrap();
    let (learned, oracle) = (rec.run(LEARNED, 4).unwrap(), rec.run(ORACLE, 4).unwrap());
    assert!(learned.trace.occupancy[0].is_finite());
    assert_ne!(learned.trace.occupancy, oracle.trace.occupancy);
}

#[test]
fn mapping_error_curves_start_at_zero() {
    let mut cfg = tiny(0);
    cfg.theorem1.reference_steps = 3;
    cfg.theorem1.deltas = vec![0.0, 1.0];
    let s: Theorem1Summary = serde_json::from_value(theorem1(&cfg).unwrap().summary).unwrap();
    assert!(s.zero_at_origin());
    assert!(s.rows[1].feature_deviation > 0.0);
    assert!(s.learnability_contrast());
}
