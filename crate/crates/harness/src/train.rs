//! Mini-batch training and evaluation of one model variant.

use scat_core::causal::{classes_present, sample_class};
use scat_core::diffcore::{DenseGrid, SeededRng};
use scat_core::occhead::{predict_labels, Confusion, MetricsReport};
use scat_core::optim::AdamW;
use scat_core::pipeline::{CausalTerm, ModelConfig, ScatModel};
use scat_core::scene::dynamic_flags;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, HarnessResult};
use crate::record::LossTrace;
use crate::suite::{mix, oracle_geometry, scene_input, view_projections, Suite};

const INIT: u64 = 10;
const BATCH: u64 = 11;
const CLASS: u64 = 12;
const TRAIN_NOISE: u64 = 13;
const EVAL_NOISE: u64 = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    /// Depth weights predicted by the model's lift head.
    Learned,
    /// Depth weights fixed to the semantic oracle.
    Oracle,
}

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub variant: String,
    pub model: ModelConfig,
    pub causal_weight: f64,
    pub sigma: f64,
    pub geometry: Geometry,
    pub steps: usize,
}

impl RunSpec {
    pub fn from_config(variant: &str, cfg: &ExperimentConfig) -> Self {
        RunSpec {
            variant: variant.to_string(),
            model: cfg.model.clone(),
            causal_weight: cfg.causal_weight,
            sigma: cfg.noise_sigma,
            geometry: Geometry::Learned,
            steps: cfg.training.steps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: ScatModel<f64>,
    pub trace: LossTrace,
    pub metrics: MetricsReport,
}

/// Suite-wide cache of oracle geometry, built only when a run needs it.
pub struct Prepared<'a> {
    pub suite: &'a Suite,
    train_oracle: Vec<Vec<DenseGrid<f64>>>,
    eval_oracle: Vec<Vec<DenseGrid<f64>>>,
}

impl<'a> Prepared<'a> {
    pub fn new(suite: &'a Suite, model: &ModelConfig, oracle: bool) -> HarnessResult<Self> {
        let (mut train_oracle, mut eval_oracle) = (Vec::new(), Vec::new());
        if oracle {
            let [lo, hi] = model.depth_range;
            let bins = scat_core::lifting::DepthBins::new(lo, hi, model.depth_bins)?;
            train_oracle = suite.train.iter().map(|s| oracle_geometry(s, &bins)).collect::<HarnessResult<_>>()?;
            eval_oracle = suite.eval.iter().map(|s| oracle_geometry(s, &bins)).collect::<HarnessResult<_>>()?;
        }
        Ok(Prepared { suite, train_oracle, eval_oracle })
    }
}

pub fn init_model(cfg: &ExperimentConfig, model: &ModelConfig, seed: u64) -> HarnessResult<ScatModel<f64>> {
    let spec = cfg.scene.spec();
    Ok(ScatModel::new(model.clone(), spec, cfg.scene.channels, cfg.scene.classes, &mut SeededRng::new(mix(&[seed, INIT])))?)
}

/// Trains from a fresh initialization and evaluates on the held-out scenes.
pub fn train_run(cfg: &ExperimentConfig, data: &Prepared<'_>, run: &RunSpec, seed: u64) -> HarnessResult<Trained> {
    let model = init_model(cfg, &run.model, seed)?;
    train_from(cfg, data, run, seed, model)
}

pub fn train_from(cfg: &ExperimentConfig, data: &Prepared<'_>, run: &RunSpec, seed: u64, mut model: ScatModel<f64>) -> HarnessResult<Trained> {
    let suite = data.suite;
    let oracle = run.geometry == Geometry::Oracle;
    if oracle && data.train_oracle.is_empty() {
        return Err(HarnessError::Config("oracle geometry was not prepared for this suite".into()));
    }
    let mut store = model.param_store()?;
    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut batch_rng = SeededRng::new(mix(&[seed, BATCH]));
    let mut class_rng = SeededRng::new(mix(&[seed, CLASS]));
    let pools: Vec<Vec<u8>> = suite.train.iter().map(|s| classes_present(&s.world.labels)).collect();
    let batch = cfg.training.batch;
    let inv = 1.0 / batch as f64;
    let mut trace = LossTrace::default();

    for step in 0..run.steps {
        store.zero_grads();
        let (mut occ, mut causal, mut total) = (0.0, 0.0, 0.0);
        for slot in 0..batch {
            let k = batch_rng.below(suite.train.len());
            let scene = &suite.train[k];
            let noise_seed = mix(&[seed, TRAIN_NOISE, step as u64, slot as u64]);
            let projections = view_projections(scene, run.sigma, noise_seed)?;
            let geometry = if oracle { Some(data.train_oracle[k].as_slice()) } else { None };
            let input = scene_input(scene, &projections, geometry);
            let term = if run.causal_weight > 0.0 {
                Some(CausalTerm { weight: run.causal_weight, class: sample_class(&mut class_rng, &pools[k])? })
            } else {
                None
            };
            let e = model.evaluate(&input, term, true).map_err(|source| HarnessError::Diverged { step, source })?;
            e.grads.as_ref().expect("gradients requested").accumulate_into(&mut store)?;
            occ += e.occupancy;
            causal += e.causal.unwrap_or(0.0);
            total += e.total;
        }
        trace.push(occ * inv, (run.causal_weight > 0.0).then_some(causal * inv), total * inv);
        store.scale_grads(inv);
        opt.step(&mut store)?;
        model.load_store(&store)?;
    }
    let metrics = evaluate_model(&model, data, run, seed)?;
    Ok(Trained { model, trace, metrics })
}

/// Metrics over all evaluation scenes; camera noise, if any, is fixed per
/// scene.
pub fn evaluate_model(model: &ScatModel<f64>, data: &Prepared<'_>, run: &RunSpec, seed: u64) -> HarnessResult<MetricsReport> {
    let suite = data.suite;
    let mut confusion = Confusion::new(model.classes);
    for (k, scene) in suite.eval.iter().enumerate() {
        let projections = view_projections(scene, run.sigma, mix(&[seed, EVAL_NOISE, k as u64]))?;
        let geometry = if run.geometry == Geometry::Oracle { Some(data.eval_oracle[k].as_slice()) } else { None };
        let logits = model.predict(&scene_input(scene, &projections, geometry))?;
        confusion.add(&predict_labels(&logits)?, &scene.world.labels)?;
    }
    Ok(confusion.report(&dynamic_flags(model.classes)))
}

/// Mean occupancy loss of a model over the evaluation scenes.
pub fn eval_occupancy(model: &ScatModel<f64>, data: &Prepared<'_>, run: &RunSpec, seed: u64) -> HarnessResult<f64> {
    let suite = data.suite;
    let mut acc = 0.0;
    for (k, scene) in suite.eval.iter().enumerate() {
        let projections = view_projections(scene, run.sigma, mix(&[seed, EVAL_NOISE, k as u64]))?;
        let geometry = if run.geometry == Geometry::Oracle { Some(data.eval_oracle[k].as_slice()) } else { None };
        acc += model.evaluate(&scene_input(scene, &projections, geometry), None, false)?.occupancy;
    }
    Ok(acc / suite.eval.len() as f64)
}
