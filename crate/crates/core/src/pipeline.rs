//! The full model: lift-weight head, camera offset heads, soft or nearest
//! splatting, normalized convolutions and the occupancy decoder, with one
//! backward pass covering both the occupancy loss and the causal term.

use serde::{Deserialize, Serialize};

use crate::causal::{
    attention, attention_backward, bce_grad, bce_loss, indicator, influence_map, influence_map_backward, label_mask,
    volume_influence, volume_influence_backward,
};
use crate::diffcore::{DenseGrid, Mlp, ParamStore, SeededRng};
use crate::error::{Error, Result};
use crate::geometry::{
    predict_global_offset, predict_pixel_offsets, CameraOffsetParams, GlobalOffset, OffsetScales, PixelOffsets, ProjectionMatrix,
    VoxelGridSpec,
};
use crate::lifting::{
    predict_group_weights, DepthBins, GroupWeights, LiftHeadCache, LiftHeadParams, SplatMode, SplatPlan, ViewGeometry,
};
use crate::normconv::{ConvStack, KernelNorm};
use crate::occhead::{decode, occupancy_ce, occupancy_ce_grad};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth_bins: usize,
    pub depth_range: [f64; 2],
    pub groups: usize,
    pub hidden: usize,
    pub conv_stages: usize,
    pub pointwise_identity_bias: f64,
    pub kernel_norm: KernelNorm,
    pub splat: SplatMode,
    pub global_offset: bool,
    pub pixel_offset: bool,
    pub offset_scales: OffsetScales,
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth_bins: 16,
            depth_range: [1.0, 9.0],
            groups: 2,
            hidden: 16,
            conv_stages: 1,
            pointwise_identity_bias: 4.0,
            kernel_norm: KernelNorm::Softmax,
            splat: SplatMode::Soft,
            global_offset: true,
            pixel_offset: true,
            offset_scales: OffsetScales::default(),
            init_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.depth_bins == 0 || self.hidden == 0 {
            return Err(Error::config("depth bins and hidden width must be positive"));
        }
        if self.groups == 0 || channels % self.groups != 0 {
            return Err(Error::config(format!("group count {} must divide channel count {channels}", self.groups)));
        }
        let [lo, hi] = self.depth_range;
        if !(lo > 0.0) || !(hi >= lo) {
            return Err(Error::config(format!("depth range {:?}", self.depth_range)));
        }
        let s = &self.offset_scales;
        if !(s.pixel > 0.0 && s.depth > 0.0 && s.matrix > 0.0) {
            return Err(Error::config("offset scales must be positive"));
        }
        Ok(())
    }
}

/// One camera view as seen by the model.
#[derive(Clone, Debug)]
pub struct ViewInput<'a, T> {
    pub features: &'a DenseGrid<T>,
    /// Projection as given to the model (possibly perturbed).
    pub projection: ProjectionMatrix<T>,
    pub labels: &'a [u8],
    /// Fixed `U×V×D` geometry replacing the learned weights.
    pub geometry: Option<&'a DenseGrid<T>>,
}

#[derive(Clone, Debug)]
pub struct SceneInput<'a, T> {
    pub views: Vec<ViewInput<'a, T>>,
    pub world: &'a [u8],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CausalTerm {
    pub weight: f64,
    pub class: u8,
}

#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub occupancy: T,
    pub causal: Option<T>,
    pub total: T,
    pub logits: DenseGrid<T>,
    /// Lifted volume before the convolutions.
    pub lifted: DenseGrid<T>,
    /// Per-view attention maps of the causal class.
    pub attention: Vec<DenseGrid<T>>,
    pub grads: Option<ScatModel<T>>,
    /// `∂ total / ∂ P_eff` per view.
    pub coord_grads: Vec<[[T; 4]; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatModel<T> {
    pub config: ModelConfig,
    pub spec: VoxelGridSpec<T>,
    pub bins: DepthBins<T>,
    pub classes: usize,
    pub lift: LiftHeadParams<T>,
    pub offsets: CameraOffsetParams<T>,
    pub convs: ConvStack<T>,
    pub decoder: Mlp<T>,
}

struct ViewState<'a, T> {
    input: &'a ViewInput<'a, T>,
    weights: DenseGrid<T>,
    learned: Option<(GroupWeights<T>, LiftHeadCache<T>)>,
    global: Option<GlobalOffset<T>>,
    pixel: Option<PixelOffsets<T>>,
    plan: SplatPlan<T>,
}

impl<T: Real> ScatModel<T> {
    pub fn new(config: ModelConfig, spec: VoxelGridSpec<T>, channels: usize, classes: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate(channels)?;
        let bins = DepthBins::new(T::lit(config.depth_range[0]), T::lit(config.depth_range[1]), config.depth_bins)?;
        let lift = LiftHeadParams::init(channels, config.hidden, config.groups, config.depth_bins, &mut rng.fork(1))?;
        let offsets = CameraOffsetParams::init(channels, config.hidden, config.depth_bins, config.offset_scales, &mut rng.fork(2));
        let mut convs = ConvStack::new(channels, config.conv_stages, config.pointwise_identity_bias);
        convs.norm = config.kernel_norm;
        let decoder = Mlp::init(channels, config.hidden, classes + 1, config.init_gain, &mut rng.fork(3));
        Ok(ScatModel { config, spec, bins, classes, lift, offsets, convs, decoder })
    }

    pub fn channels(&self) -> usize {
        self.decoder.inputs()
    }

    pub fn zeros_like(&self) -> Self {
        ScatModel {
            config: self.config.clone(),
            spec: self.spec,
            bins: self.bins,
            classes: self.classes,
            lift: LiftHeadParams { mlp: self.lift.mlp.zeros_like(), ..self.lift.clone() },
            offsets: self.offsets.zeros_like(),
            convs: self.convs.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Named trainable tensors; disabled heads are left out.
    pub fn tensors(&self) -> Vec<(String, &DenseGrid<T>)> {
        let mut out = Vec::new();
        for (n, t) in self.lift.mlp.tensors() {
            out.push((format!("lift.{n}"), t));
        }
        if self.config.global_offset {
            for (n, t) in self.offsets.global.tensors() {
                out.push((format!("offset.global.{n}"), t));
            }
        }
        if self.config.pixel_offset {
            for (n, t) in self.offsets.pixel.tensors() {
                out.push((format!("offset.pixel.{n}"), t));
            }
        }
        for (k, s) in self.convs.stages.iter().enumerate() {
            out.push((format!("conv{k}.depthwise"), &s.depthwise));
            out.push((format!("conv{k}.pointwise"), &s.pointwise));
        }
        for (n, t) in self.decoder.tensors() {
            out.push((format!("decoder.{n}"), t));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseGrid<T>> {
        let mut out: Vec<&mut DenseGrid<T>> = Vec::new();
        out.extend(self.lift.mlp.tensors_mut().into_iter().map(|(_, t)| t));
        if self.config.global_offset {
            out.extend(self.offsets.global.tensors_mut().into_iter().map(|(_, t)| t));
        }
        if self.config.pixel_offset {
            out.extend(self.offsets.pixel.tensors_mut().into_iter().map(|(_, t)| t));
        }
        for s in &mut self.convs.stages {
            out.push(&mut s.depthwise);
            out.push(&mut s.pointwise);
        }
        out.extend(self.decoder.tensors_mut().into_iter().map(|(_, t)| t));
        out
    }

    pub fn param_store(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (n, t) in self.tensors() {
            store.insert(&n, t.clone())?;
        }
        Ok(store)
    }

    pub fn load_store(&mut self, store: &ParamStore<T>) -> Result<()> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(self.tensors_mut()) {
            let v = store.value(name)?;
            v.expect_shape(t.shape(), name)?;
            t.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    /// Adds this gradient model into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (n, t) in self.tensors() {
            store.accumulate(&n, t)?;
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().into_iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            let src = flat.get(at..at + n).ok_or_else(|| Error::shape("flat parameter vector too short"))?;
            t.data_mut().copy_from_slice(src);
            at += n;
        }
        if at != flat.len() {
            return Err(Error::shape("flat parameter vector too long"));
        }
        Ok(())
    }

    fn prepare<'a>(&self, view: &'a ViewInput<'a, T>) -> Result<ViewState<'a, T>> {
        let f = view.features;
        let (u, v) = match f.shape() {
            &[u, v, c] if c == self.channels() => (u, v),
            other => return Err(Error::shape(format!("view features {other:?}, expected U×V×{}", self.channels()))),
        };
        let d = self.config.depth_bins;
        let (weights, learned) = match view.geometry {
            Some(g) => {
                g.expect_shape(&[u, v, d], "fixed geometry")?;
                (g.clone().reshape(&[u, v, 1, d])?, None)
            }
            None => {
                let (w, cache) = predict_group_weights(f, &self.lift)?;
                (w.values().clone(), Some((w, cache)))
            }
        };
        let global = if self.config.global_offset { Some(predict_global_offset(f, &view.projection, &self.offsets)?) } else { None };
        let pixel = if self.config.pixel_offset { Some(predict_pixel_offsets(f, &self.offsets)?) } else { None };
        let projection = match &global {
            Some(g) => view.projection.plus(&g.delta),
            None => view.projection,
        };
        let geom = ViewGeometry {
            projection,
            pixel_offsets: pixel.as_ref().map(|p| &p.values),
            bins: self.bins,
            spec: self.spec,
            image: (u, v),
        };
        let plan = SplatPlan::build(&geom, self.config.splat)?;
        Ok(ViewState { input: view, weights, learned, global, pixel, plan })
    }

    /// The view's splat plan and its `U×V×G×D` weights, frozen at the
    /// current parameters.
    pub fn view_plan(&self, view: &ViewInput<'_, T>) -> Result<(SplatPlan<T>, DenseGrid<T>)> {
        let st = self.prepare(view)?;
        Ok((st.plan, st.weights))
    }

    /// `∇_s` for every view, each `U×V×C`.
    pub fn influence_maps(&self, scene: &SceneInput<'_, T>, class: u8) -> Result<Vec<DenseGrid<T>>> {
        let ind = indicator(scene.world, self.spec.extent, class, self.channels())?;
        let g0 = volume_influence(&self.convs, &ind)?;
        scene
            .views
            .iter()
            .map(|v| {
                let st = self.prepare(v)?;
                influence_map(&st.plan, &st.weights, &g0)
            })
            .collect()
    }

    /// Lifted, summed volume of all views.
    pub fn lift_scene(&self, scene: &SceneInput<'_, T>) -> Result<DenseGrid<T>> {
        let [h, w, z] = self.spec.extent;
        let mut vol = DenseGrid::zeros(&[h, w, z, self.channels()]);
        for view in &scene.views {
            let st = self.prepare(view)?;
            st.plan.deposit(view.features, &st.weights, &mut vol)?;
        }
        Ok(vol)
    }

    pub fn predict(&self, scene: &SceneInput<'_, T>) -> Result<DenseGrid<T>> {
        let lifted = self.lift_scene(scene)?;
        let (refined, _) = self.convs.forward(&lifted)?;
        Ok(decode(&refined, &self.decoder)?.0)
    }

    /// Losses and, if requested, gradients w.r.t. every trainable tensor.
    pub fn evaluate(&self, scene: &SceneInput<'_, T>, causal: Option<CausalTerm>, want_grads: bool) -> Result<Evaluation<T>> {
        if scene.world.len() != self.spec.voxels() {
            return Err(Error::shape("world labels do not match the voxel grid"));
        }
        let c = self.channels();
        let [h, w, z] = self.spec.extent;
        let states = scene.views.iter().map(|v| self.prepare(v)).collect::<Result<Vec<_>>>()?;
        let mut lifted = DenseGrid::zeros(&[h, w, z, c]);
        for st in &states {
            st.plan.deposit(st.input.features, &st.weights, &mut lifted)?;
        }
        let (refined, trace) = self.convs.forward(&lifted)?;
        let (logits, dcache) = decode(&refined, &self.decoder)?;
        let occupancy = occupancy_ce(&logits, scene.world)?;
        let nviews = T::from_usize_lossy(states.len().max(1));

        let mut attention_maps = Vec::new();
        let mut causal_parts = None;
        let mut causal_value = None;
        if let Some(term) = causal {
            let ind = indicator(scene.world, self.spec.extent, term.class, c)?;
            let g0 = volume_influence(&self.convs, &ind)?;
            let mut total = T::zero();
            let mut per_view = Vec::new();
            for st in &states {
                let map = influence_map(&st.plan, &st.weights, &g0)?;
                let a = attention(&map)?;
                let (u, v) = st.plan.image();
                let y = label_mask(st.input.labels, (u, v), term.class)?;
                total += bce_loss(&a, &y)?;
                per_view.push((a.clone(), y));
                attention_maps.push(a);
            }
            let value = total / nviews;
            causal_value = Some(value);
            causal_parts = Some((term.weight, g0, per_view));
        }
        let total = occupancy + causal_value.map_or(T::zero(), |v| v * T::lit(causal.map_or(0.0, |t| t.weight)));

        if !occupancy.is_finite() || !total.is_finite() {
            return Err(Error::NonFinite { what: "loss".into(), index: 0 });
        }
        if !want_grads {
            return Ok(Evaluation {
                occupancy,
                causal: causal_value,
                total,
                logits,
                lifted,
                attention: attention_maps,
                grads: None,
                coord_grads: Vec::new(),
            });
        }

        let mut grads = self.zeros_like();
        let dlogits = occupancy_ce_grad(&logits, scene.world)?;
        let (ddec, drefined) = dcache.backward(&self.decoder, &refined, &dlogits)?;
        grads.decoder = ddec;
        let (dconv, dlifted) = self.convs.backward(&trace, &drefined)?;
        grads.convs.add_assign(&dconv)?;

        let mut dweights: Vec<DenseGrid<T>> = Vec::with_capacity(states.len());
        let mut dcoords: Vec<Vec<[T; 3]>> = Vec::with_capacity(states.len());
        for st in &states {
            let g = st.plan.bilinear_grads(&st.weights, st.input.features, &dlifted)?;
            dweights.push(g.weights);
            dcoords.push(g.coords);
        }

        if let Some((weight, g0, per_view)) = &causal_parts {
            let scale = T::lit(*weight) / nviews;
            let mut dg0 = g0.volume.zeros_like();
            for (k, (st, (a, y))) in states.iter().zip(per_view).enumerate() {
                let da = bce_grad(a, y)?.scale(scale);
                let dmap = attention_backward(&da, c)?;
                let g = influence_map_backward(&st.plan, &st.weights, g0, &dmap, &mut dg0)?;
                dweights[k].add_assign(&g.weights)?;
                for (acc, x) in dcoords[k].iter_mut().zip(&g.coords) {
                    for a in 0..3 {
                        acc[a] += x[a];
                    }
                }
            }
            grads.convs.add_assign(&volume_influence_backward(&self.convs, g0, &dg0)?)?;
        }

        let mut coord_grads = Vec::with_capacity(states.len());
        for (k, st) in states.iter().enumerate() {
            if let Some((gw, cache)) = &st.learned {
                let (g, _) = cache.backward(&self.lift, st.input.features, gw, &dweights[k], false)?;
                grads.lift.mlp.add_assign(&g)?;
            }
            let (dp, doff) = st.plan.coords_backward(&dcoords[k])?;
            if let Some(go) = &st.global {
                let (g, _) = go.backward(&self.offsets, &dp)?;
                grads.offsets.global.add_assign(&g)?;
            }
            if let (Some(po), Some(doff)) = (&st.pixel, doff) {
                let (g, _) = po.backward(&self.offsets, st.input.features, &doff, false)?;
                grads.offsets.pixel.add_assign(&g)?;
            }
            coord_grads.push(dp);
        }

        Ok(Evaluation {
            occupancy,
            causal: causal_value,
            total,
            logits,
            lifted,
            attention: attention_maps,
            grads: Some(grads),
            coord_grads,
        })
    }
}
