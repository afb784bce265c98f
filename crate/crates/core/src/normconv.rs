//! Normalized 3D convolutions: a transposed depthwise 3×3×3 stage with
//! per-channel spatial softmax, followed by a pointwise channel mix whose
//! rows (one per input channel) are softmax-normalized over output channels.

use serde::{Deserialize, Serialize};

use crate::diffcore::DenseGrid;
use crate::error::{Error, Result};
use crate::scalar::{softmax_backward_into, softmax_into, Real};

pub const TAPS: usize = 27;

/// How kernel logits become weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelNorm {
    #[default]
    Softmax,
    /// `exp(logit)` with no normalization. Breaks the stochasticity
    /// invariants; kept as a fault fixture.
    Unnormalized,
}

fn channels_of<T: Real>(x: &DenseGrid<T>, what: &str) -> Result<([usize; 3], usize)> {
    match x.shape() {
        &[h, w, z, c] => Ok(([h, w, z], c)),
        other => Err(Error::shape(format!("{what}: expected H×W×Z×C, got {other:?}"))),
    }
}

/// Softmax over the 27 spatial taps, independently per channel.
pub fn normalize_spatial<T: Real>(logits: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let c = spatial_channels(logits)?;
    let mut out = logits.zeros_like();
    let mut col = [T::zero(); TAPS];
    let mut sm = [T::zero(); TAPS];
    for ch in 0..c {
        for t in 0..TAPS {
            col[t] = logits.data()[t * c + ch];
        }
        softmax_into(&col, &mut sm);
        for t in 0..TAPS {
            out.data_mut()[t * c + ch] = sm[t];
        }
    }
    Ok(out)
}

pub fn normalize_spatial_backward<T: Real>(weights: &DenseGrid<T>, dweights: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let c = spatial_channels(weights)?;
    dweights.expect_shape(weights.shape(), "spatial kernel gradient")?;
    let mut out = weights.zeros_like();
    let (mut p, mut g, mut d) = ([T::zero(); TAPS], [T::zero(); TAPS], [T::zero(); TAPS]);
    for ch in 0..c {
        for t in 0..TAPS {
            p[t] = weights.data()[t * c + ch];
            g[t] = dweights.data()[t * c + ch];
        }
        softmax_backward_into(&p, &g, &mut d);
        for t in 0..TAPS {
            out.data_mut()[t * c + ch] = d[t];
        }
    }
    Ok(out)
}

fn spatial_channels<T: Real>(k: &DenseGrid<T>) -> Result<usize> {
    match k.shape() {
        &[3, 3, 3, c] => Ok(c),
        other => Err(Error::shape(format!("depthwise kernel must be 3×3×3×C, got {other:?}"))),
    }
}

fn pointwise_channels<T: Real>(k: &DenseGrid<T>) -> Result<usize> {
    match k.shape() {
        &[a, b] if a == b => Ok(a),
        other => Err(Error::shape(format!("pointwise kernel must be C×C, got {other:?}"))),
    }
}

/// Softmax over `c_out` for each `c_in` row.
pub fn normalize_channel<T: Real>(logits: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let c = pointwise_channels(logits)?;
    let mut out = logits.zeros_like();
    for (l, o) in logits.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
        softmax_into(l, o);
    }
    Ok(out)
}

pub fn normalize_channel_backward<T: Real>(weights: &DenseGrid<T>, dweights: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let c = pointwise_channels(weights)?;
    dweights.expect_shape(weights.shape(), "pointwise kernel gradient")?;
    let mut out = weights.zeros_like();
    for ((p, g), o) in weights
        .data()
        .chunks_exact(c)
        .zip(dweights.data().chunks_exact(c))
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        softmax_backward_into(p, g, o);
    }
    Ok(out)
}

/// Scatter: every input voxel spreads over its 3×3×3 output neighborhood.
/// Mass leaving the grid is dropped.
pub fn transposed_depthwise<T: Real>(x: &DenseGrid<T>, kernel: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let (ext, c) = channels_of(x, "transposed depthwise input")?;
    check_kernel(kernel, c, ext)?;
    let mut out = x.zeros_like();
    let (xd, kd) = (x.data(), kernel.data());
    let od = out.data_mut();
    for_each_pair(ext, |src, dst, t| {
        let (xs, ks) = (&xd[src * c..(src + 1) * c], &kd[t * c..(t + 1) * c]);
        let o = &mut od[dst * c..(dst + 1) * c];
        for ch in 0..c {
            o[ch] += xs[ch] * ks[ch];
        }
    });
    Ok(out)
}

/// Transpose of [`transposed_depthwise`]: a gather over the same stencil.
pub fn transposed_depthwise_adjoint<T: Real>(g: &DenseGrid<T>, kernel: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let (ext, c) = channels_of(g, "transposed depthwise cotangent")?;
    check_kernel(kernel, c, ext)?;
    let mut out = g.zeros_like();
    let (gd, kd) = (g.data(), kernel.data());
    let od = out.data_mut();
    for_each_pair(ext, |src, dst, t| {
        let (gs, ks) = (&gd[dst * c..(dst + 1) * c], &kd[t * c..(t + 1) * c]);
        let o = &mut od[src * c..(src + 1) * c];
        for ch in 0..c {
            o[ch] += gs[ch] * ks[ch];
        }
    });
    Ok(out)
}

/// `∂⟨g, transposed_depthwise(x, W)⟩/∂W`.
pub fn transposed_depthwise_kernel_grad<T: Real>(x: &DenseGrid<T>, g: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let (ext, c) = channels_of(x, "transposed depthwise input")?;
    g.expect_shape(x.shape(), "transposed depthwise cotangent")?;
    let mut out = DenseGrid::zeros(&[3, 3, 3, c]);
    let (xd, gd) = (x.data(), g.data());
    let od = out.data_mut();
    for_each_pair(ext, |src, dst, t| {
        let (xs, gs) = (&xd[src * c..(src + 1) * c], &gd[dst * c..(dst + 1) * c]);
        let o = &mut od[t * c..(t + 1) * c];
        for ch in 0..c {
            o[ch] += xs[ch] * gs[ch];
        }
    });
    Ok(out)
}

fn check_kernel<T: Real>(kernel: &DenseGrid<T>, c: usize, ext: [usize; 3]) -> Result<()> {
    if spatial_channels(kernel)? != c {
        return Err(Error::shape(format!("depthwise kernel has {} channels, volume {c}", kernel.shape()[3])));
    }
    if ext.iter().any(|&e| e < 3) {
        return Err(Error::shape(format!("grid extents {ext:?} must be at least 3")));
    }
    Ok(())
}

/// Visits `(source voxel, target voxel, tap)` for every in-grid target, in
/// ascending source order then tap order.
fn for_each_pair(ext: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [nh, nw, nz] = ext;
    for h in 0..nh {
        for w in 0..nw {
            for z in 0..nz {
                let src = (h * nw + w) * nz + z;
                for t in 0..TAPS {
                    let (th, tw, tz) = (h + t / 9, w + (t / 3) % 3, z + t % 3);
                    if th == 0 || tw == 0 || tz == 0 || th > nh || tw > nw || tz > nz {
                        continue;
                    }
                    f(src, ((th - 1) * nw + (tw - 1)) * nz + (tz - 1), t);
                }
            }
        }
    }
}

/// Per-voxel mix `out[c_out] = Σ_{c_in} x[c_in] · W[c_in, c_out]`.
pub fn pointwise<T: Real>(x: &DenseGrid<T>, kernel: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let (_, c) = channels_of(x, "pointwise input")?;
    if pointwise_channels(kernel)? != c {
        return Err(Error::shape("pointwise kernel channel mismatch"));
    }
    let mut out = x.zeros_like();
    let kd = kernel.data();
    for (xs, o) in x.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
        for ci in 0..c {
            let row = &kd[ci * c..(ci + 1) * c];
            for co in 0..c {
                o[co] += xs[ci] * row[co];
            }
        }
    }
    Ok(out)
}

pub fn pointwise_adjoint<T: Real>(g: &DenseGrid<T>, kernel: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let (_, c) = channels_of(g, "pointwise cotangent")?;
    if pointwise_channels(kernel)? != c {
        return Err(Error::shape("pointwise kernel channel mismatch"));
    }
    let mut out = g.zeros_like();
    let kd = kernel.data();
    for (gs, o) in g.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
        for ci in 0..c {
            let row = &kd[ci * c..(ci + 1) * c];
            let mut acc = T::zero();
            for co in 0..c {
                acc += row[co] * gs[co];
            }
            o[ci] = acc;
        }
    }
    Ok(out)
}

pub fn pointwise_kernel_grad<T: Real>(x: &DenseGrid<T>, g: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let (_, c) = channels_of(x, "pointwise input")?;
    g.expect_shape(x.shape(), "pointwise cotangent")?;
    let mut out = DenseGrid::zeros(&[c, c]);
    let od = out.data_mut();
    for (xs, gs) in x.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
        for ci in 0..c {
            let row = &mut od[ci * c..(ci + 1) * c];
            for co in 0..c {
                row[co] += xs[ci] * gs[co];
            }
        }
    }
    Ok(out)
}

/// One depthwise + pointwise pair, stored as logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage<T> {
    pub depthwise: DenseGrid<T>,
    pub pointwise: DenseGrid<T>,
}

impl<T: Real> ConvStage<T> {
    /// Uniform spatial kernel; pointwise logits `bias · I`, which keeps most
    /// of each channel in place at initialization.
    pub fn init(channels: usize, identity_bias: f64) -> Self {
        let b = T::lit(identity_bias);
        ConvStage {
            depthwise: DenseGrid::zeros(&[3, 3, 3, channels]),
            pointwise: DenseGrid::from_fn(&[channels, channels], |i| {
                if i / channels == i % channels {
                    b
                } else {
                    T::zero()
                }
            }),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvStage { depthwise: self.depthwise.zeros_like(), pointwise: self.pointwise.zeros_like() }
    }
}

/// Normalized kernel weights of a stage.
#[derive(Clone, Debug)]
pub struct StageWeights<T> {
    pub depthwise: DenseGrid<T>,
    pub pointwise: DenseGrid<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T> {
    pub stages: Vec<ConvStage<T>>,
    pub norm: KernelNorm,
}

/// Intermediate volumes of a chain evaluation: `inputs[k]` enters
/// operator `k`. Operators alternate depthwise, pointwise per stage.
#[derive(Clone, Debug)]
pub struct ChainTrace<T> {
    inputs: Vec<DenseGrid<T>>,
    weights: Vec<StageWeights<T>>,
}

impl<T: Real> ChainTrace<T> {
    pub fn weights(&self) -> &[StageWeights<T>] {
        &self.weights
    }
}

impl<T: Real> ConvStack<T> {
    pub fn new(channels: usize, stages: usize, identity_bias: f64) -> Self {
        ConvStack { stages: (0..stages).map(|_| ConvStage::init(channels, identity_bias)).collect(), norm: KernelNorm::Softmax }
    }

    pub fn zeros_like(&self) -> Self {
        ConvStack { stages: self.stages.iter().map(ConvStage::zeros_like).collect(), norm: self.norm }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.depthwise.add_assign(&b.depthwise)?;
            a.pointwise.add_assign(&b.pointwise)?;
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<Vec<StageWeights<T>>> {
        self.stages
            .iter()
            .map(|s| {
                Ok(match self.norm {
                    KernelNorm::Softmax => StageWeights {
                        depthwise: normalize_spatial(&s.depthwise)?,
                        pointwise: normalize_channel(&s.pointwise)?,
                    },
                    KernelNorm::Unnormalized => StageWeights {
                        depthwise: s.depthwise.map(|x| x.exp()),
                        pointwise: s.pointwise.map(|x| x.exp()),
                    },
                })
            })
            .collect()
    }

    fn logits_backward(&self, weights: &[StageWeights<T>], dweights: Vec<StageWeights<T>>) -> Result<ConvStack<T>> {
        let mut out = self.zeros_like();
        for ((o, w), d) in out.stages.iter_mut().zip(weights).zip(dweights) {
            match self.norm {
                KernelNorm::Softmax => {
                    o.depthwise = normalize_spatial_backward(&w.depthwise, &d.depthwise)?;
                    o.pointwise = normalize_channel_backward(&w.pointwise, &d.pointwise)?;
                }
                KernelNorm::Unnormalized => {
                    o.depthwise = DenseGrid::from_fn(w.depthwise.shape(), |i| w.depthwise.data()[i] * d.depthwise.data()[i]);
                    o.pointwise = DenseGrid::from_fn(w.pointwise.shape(), |i| w.pointwise.data()[i] * d.pointwise.data()[i]);
                }
            }
        }
        Ok(out)
    }

    /// `x → PW_K ∘ DW_K ∘ … ∘ PW_1 ∘ DW_1 (x)`.
    pub fn forward(&self, x: &DenseGrid<T>) -> Result<(DenseGrid<T>, ChainTrace<T>)> {
        let weights = self.weights()?;
        let mut inputs = Vec::with_capacity(2 * weights.len());
        let mut cur = x.clone();
        for w in &weights {
            let next = transposed_depthwise(&cur, &w.depthwise)?;
            inputs.push(cur);
            let after = pointwise(&next, &w.pointwise)?;
            inputs.push(next);
            cur = after;
        }
        Ok((cur, ChainTrace { inputs, weights }))
    }

    /// Logit gradients and `∂L/∂x` from `∂L/∂forward(x)`.
    pub fn backward(&self, trace: &ChainTrace<T>, dout: &DenseGrid<T>) -> Result<(ConvStack<T>, DenseGrid<T>)> {
        let mut dweights = Vec::with_capacity(trace.weights.len());
        let mut g = dout.clone();
        for (k, w) in trace.weights.iter().enumerate().rev() {
            let dpw = pointwise_kernel_grad(&trace.inputs[2 * k + 1], &g)?;
            g = pointwise_adjoint(&g, &w.pointwise)?;
            let ddw = transposed_depthwise_kernel_grad(&trace.inputs[2 * k], &g)?;
            g = transposed_depthwise_adjoint(&g, &w.depthwise)?;
            dweights.push(StageWeights { depthwise: ddw, pointwise: dpw });
        }
        dweights.reverse();
        Ok((self.logits_backward(&trace.weights, dweights)?, g))
    }

    /// Applies the transposed chain, `DW_1ᵀ ∘ PW_1ᵀ ∘ … ∘ PW_Kᵀ (y)`.
    pub fn adjoint(&self, y: &DenseGrid<T>) -> Result<(DenseGrid<T>, ChainTrace<T>)> {
        let weights = self.weights()?;
        let n = weights.len();
        let mut inputs = vec![y.clone(); 2 * n];
        let mut cur = y.clone();
        for k in (0..n).rev() {
            inputs[2 * k + 1] = cur.clone();
            let mid = pointwise_adjoint(&cur, &weights[k].pointwise)?;
            inputs[2 * k] = mid.clone();
            cur = transposed_depthwise_adjoint(&mid, &weights[k].depthwise)?;
        }
        Ok((cur, ChainTrace { inputs, weights }))
    }

    /// Logit gradients and `∂L/∂y` from `∂L/∂adjoint(y)`.
    pub fn adjoint_backward(&self, trace: &ChainTrace<T>, dout: &DenseGrid<T>) -> Result<(ConvStack<T>, DenseGrid<T>)> {
        let n = trace.weights.len();
        let mut dweights = Vec::with_capacity(n);
        let mut g = dout.clone();
        for k in 0..n {
            let w = &trace.weights[k];
            // ⟨g, DWᵀ m⟩ = ⟨DW g, m⟩
            let ddw = transposed_depthwise_kernel_grad(&g, &trace.inputs[2 * k])?;
            g = transposed_depthwise(&g, &w.depthwise)?;
            let dpw = pointwise_kernel_grad(&g, &trace.inputs[2 * k + 1])?;
            g = pointwise(&g, &w.pointwise)?;
            dweights.push(StageWeights { depthwise: ddw, pointwise: dpw });
        }
        Ok((self.logits_backward(&trace.weights, dweights)?, g))
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend_from_slice(s.depthwise.data());
            out.extend_from_slice(s.pointwise.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        let need: usize = self.stages.iter().map(|s| s.depthwise.len() + s.pointwise.len()).sum();
        if flat.len() != need {
            return Err(Error::shape(format!("conv stack expects {need} values, got {}", flat.len())));
        }
        let mut at = 0;
        for s in &mut self.stages {
            for g in [&mut s.depthwise, &mut s.pointwise] {
                let n = g.len();
                g.data_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }
}
