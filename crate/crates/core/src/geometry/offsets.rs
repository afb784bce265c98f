use serde::{Deserialize, Serialize};

use crate::diffcore::{DenseGrid, Mlp, MlpCache, SeededRng};
use crate::error::{Error, Result};
use crate::geometry::ProjectionMatrix;
use crate::scalar::Real;

/// Saturation bounds for the offset heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetScales {
    /// Max |Δu|, |Δv| in pixels.
    pub pixel: f64,
    /// Max |Δd| in depth bins.
    pub depth: f64,
    /// ΔP_ij is bounded by `matrix · (|P_ij| + 1)`.
    pub matrix: f64,
}

impl Default for OffsetScales {
    fn default() -> Self {
        OffsetScales { pixel: 1.0, depth: 1.0, matrix: 0.05 }
    }
}

/// Global head: (pooled features, flattened P) → 12 values for ΔP.
/// Pixel head: f_i(u, v) → (Δu, Δv, Δd) for every depth bin.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraOffsetParams<T> {
    pub global: Mlp<T>,
    pub pixel: Mlp<T>,
    pub scales: OffsetScales,
    depth_bins: usize,
}

impl<T: Real> CameraOffsetParams<T> {
    pub fn zeros(channels: usize, hidden: usize, depth_bins: usize, scales: OffsetScales) -> Self {
        CameraOffsetParams {
            global: Mlp::zeros(channels + 12, hidden, 12),
            pixel: Mlp::zeros(channels, hidden, 3 * depth_bins),
            scales,
            depth_bins,
        }
    }

    /// Random first stages, zero output stages: offsets are exactly zero at init.
    pub fn init(channels: usize, hidden: usize, depth_bins: usize, scales: OffsetScales, rng: &mut SeededRng) -> Self {
        CameraOffsetParams {
            global: Mlp::init(channels + 12, hidden, 12, 1.0, rng),
            pixel: Mlp::init(channels, hidden, 3 * depth_bins, 1.0, rng),
            scales,
            depth_bins,
        }
    }

    pub fn channels(&self) -> usize {
        self.pixel.inputs()
    }

    pub fn depth_bins(&self) -> usize {
        self.depth_bins
    }

    pub fn zeros_like(&self) -> Self {
        CameraOffsetParams {
            global: self.global.zeros_like(),
            pixel: self.pixel.zeros_like(),
            scales: self.scales,
            depth_bins: self.depth_bins,
        }
    }

    /// True when `delta` respects `|ΔP_ij| ≤ s·|P_ij| + s`.
    pub fn matrix_bound_holds(&self, p: &ProjectionMatrix<T>, delta: &[[T; 4]; 3]) -> bool {
        let s = T::lit(self.scales.matrix);
        p.entries()
            .iter()
            .flatten()
            .zip(delta.iter().flatten())
            .all(|(&pij, &dij)| dij.abs() <= s * pij.abs() + s)
    }
}

fn image_dims<T: Real>(f_i: &DenseGrid<T>, channels: usize) -> Result<(usize, usize)> {
    match f_i.shape() {
        &[u, v, c] if c == channels => Ok((u, v)),
        other => Err(Error::shape(format!("image features {other:?}, expected U×V×{channels}"))),
    }
}

/// Output of [`predict_global_offset`] with what its backward pass needs.
#[derive(Clone, Debug)]
pub struct GlobalOffset<T> {
    pub delta: [[T; 4]; 3],
    input: Vec<T>,
    squashed: Vec<T>,
    gain: [T; 12],
    cache: MlpCache<T>,
    image: (usize, usize),
}

pub fn predict_global_offset<T: Real>(
    f_i: &DenseGrid<T>,
    p: &ProjectionMatrix<T>,
    params: &CameraOffsetParams<T>,
) -> Result<GlobalOffset<T>> {
    let c = params.channels();
    let (u, v) = image_dims(f_i, c)?;
    let mut input = vec![T::zero(); c + 12];
    for px in f_i.data().chunks_exact(c) {
        for (acc, &x) in input.iter_mut().zip(px) {
            *acc += x;
        }
    }
    let inv = T::one() / T::from_usize_lossy(u * v);
    input[..c].iter_mut().for_each(|x| *x *= inv);
    let flat = p.flat();
    input[c..].copy_from_slice(&flat);

    let (raw, cache) = params.global.forward(&input)?;
    let s = T::lit(params.scales.matrix);
    let mut delta = [[T::zero(); 4]; 3];
    let mut squashed = vec![T::zero(); 12];
    let mut gain = [T::zero(); 12];
    for k in 0..12 {
        gain[k] = s * (flat[k].abs() + T::one());
        squashed[k] = raw[k].tanh();
        delta[k / 4][k % 4] = gain[k] * squashed[k];
    }
    Ok(GlobalOffset { delta, input, squashed, gain, cache, image: (u, v) })
}

impl<T: Real> GlobalOffset<T> {
    /// Returns head-parameter gradients and `∂L/∂f_i` given `∂L/∂ΔP`.
    pub fn backward(&self, params: &CameraOffsetParams<T>, ddelta: &[[T; 4]; 3]) -> Result<(Mlp<T>, DenseGrid<T>)> {
        let mut draw = vec![T::zero(); 12];
        for k in 0..12 {
            let t = self.squashed[k];
            draw[k] = ddelta[k / 4][k % 4] * self.gain[k] * (T::one() - t * t);
        }
        let (grads, dinput) = params.global.backward(&self.input, &self.cache, &draw, true)?;
        let dinput = dinput.expect("requested input gradient");
        let c = params.channels();
        let (u, v) = self.image;
        let inv = T::one() / T::from_usize_lossy(u * v);
        let df = DenseGrid::from_fn(&[u, v, c], |i| dinput[i % c] * inv);
        Ok((grads, df))
    }
}

/// Per-position offsets `U×V×D×3` laid out as (Δu, Δv, Δd).
#[derive(Clone, Debug)]
pub struct PixelOffsets<T> {
    pub values: DenseGrid<T>,
    squashed: Vec<T>,
    cache: MlpCache<T>,
}

pub fn predict_pixel_offsets<T: Real>(f_i: &DenseGrid<T>, params: &CameraOffsetParams<T>) -> Result<PixelOffsets<T>> {
    let (u, v) = image_dims(f_i, params.channels())?;
    let d = params.depth_bins;
    let (raw, cache) = params.pixel.forward(f_i.data())?;
    let scale = [T::lit(params.scales.pixel), T::lit(params.scales.pixel), T::lit(params.scales.depth)];
    let squashed: Vec<T> = raw.iter().map(|x| x.tanh()).collect();
    let values = DenseGrid::from_fn(&[u, v, d, 3], |i| scale[i % 3] * squashed[i]);
    Ok(PixelOffsets { values, squashed, cache })
}

impl<T: Real> PixelOffsets<T> {
    pub fn backward(
        &self,
        params: &CameraOffsetParams<T>,
        f_i: &DenseGrid<T>,
        dvalues: &DenseGrid<T>,
        want_input: bool,
    ) -> Result<(Mlp<T>, Option<DenseGrid<T>>)> {
        dvalues.expect_shape(self.values.shape(), "pixel offset gradient")?;
        let scale = [T::lit(params.scales.pixel), T::lit(params.scales.pixel), T::lit(params.scales.depth)];
        let draw: Vec<T> = dvalues
            .data()
            .iter()
            .zip(&self.squashed)
            .enumerate()
            .map(|(i, (&g, &t))| g * scale[i % 3] * (T::one() - t * t))
            .collect();
        let (grads, dx) = params.pixel.backward(f_i.data(), &self.cache, &draw, want_input)?;
        let dx = match dx {
            Some(v) => Some(DenseGrid::from_vec(f_i.shape(), v)?),
            None => None,
        };
        Ok((grads, dx))
    }
}
