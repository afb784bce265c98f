use crate::diffcore::{DenseGrid, SeededRng};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-wise two-stage map `y = W2 · tanh(W1 · x + b1) + b2`.
///
/// Used for every small learnable head in the pipeline (lift weights,
/// camera offsets, occupancy decoder); each row is one pixel or voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub w1: DenseGrid<T>,
    pub b1: DenseGrid<T>,
    pub w2: DenseGrid<T>,
    pub b2: DenseGrid<T>,
}

/// Post-activation hidden values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    hidden: Vec<T>,
    rows: usize,
}


impl<T: Real> Mlp<T> {
    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Mlp {
            w1: DenseGrid::zeros(&[hidden, inputs]),
            b1: DenseGrid::zeros(&[hidden]),
            w2: DenseGrid::zeros(&[outputs, hidden]),
            b2: DenseGrid::zeros(&[outputs]),
        }
    }

    /// Gaussian first stage with variance `gain² / inputs`; second stage zero,
    /// so the head outputs exactly `b2 = 0` until it is trained.
    pub fn init(inputs: usize, hidden: usize, outputs: usize, gain: f64, rng: &mut SeededRng) -> Self {
        let mut mlp = Self::zeros(inputs, hidden, outputs);
        let std = gain / (inputs as f64).sqrt();
        for w in mlp.w1.data_mut() {
            *w = T::lit(std * rng.normal());
        }
        mlp
    }

    pub fn inputs(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.hidden(), self.outputs())
    }

    pub fn tensors(&self) -> [(&'static str, &DenseGrid<T>); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut DenseGrid<T>); 4] {
        [("w1", &mut self.w1), ("b1", &mut self.b1), ("w2", &mut self.w2), ("b2", &mut self.b2)]
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.w1.add_assign(&other.w1)?;
        self.b1.add_assign(&other.b1)?;
        self.w2.add_assign(&other.w2)?;
        self.b2.add_assign(&other.b2)
    }

    /// Applies the map to `x`, laid out as `rows × inputs`.
    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, MlpCache<T>)> {
        let (n_in, n_h, n_out) = (self.inputs(), self.hidden(), self.outputs());
        if x.len() % n_in != 0 {
            return Err(Error::shape(format!("mlp input length {} not a multiple of {n_in}", x.len())));
        }
        let rows = x.len() / n_in;
        let (w1, b1, w2, b2) = (self.w1.data(), self.b1.data(), self.w2.data(), self.b2.data());
        let mut hidden = vec![T::zero(); rows * n_h];
        let mut out = vec![T::zero(); rows * n_out];
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let hr = &mut hidden[r * n_h..(r + 1) * n_h];
            for (j, h) in hr.iter_mut().enumerate() {
                let wj = &w1[j * n_in..(j + 1) * n_in];
                let mut acc = b1[j];
                for (&w, &xi) in wj.iter().zip(xr) {
                    acc += w * xi;
                }
                *h = acc.tanh();
            }
            let or = &mut out[r * n_out..(r + 1) * n_out];
            for (k, o) in or.iter_mut().enumerate() {
                let wk = &w2[k * n_h..(k + 1) * n_h];
                let mut acc = b2[k];
                for (&w, &h) in wk.iter().zip(hr.iter()) {
                    acc += w * h;
                }
                *o = acc;
            }
        }
        Ok((out, MlpCache { hidden, rows }))
    }

    /// Returns parameter gradients and, if `want_input`, the input gradient.
    pub fn backward(
        &self,
        x: &[T],
        cache: &MlpCache<T>,
        dout: &[T],
        want_input: bool,
    ) -> Result<(Self, Option<Vec<T>>)> {
        let (n_in, n_h, n_out) = (self.inputs(), self.hidden(), self.outputs());
        let rows = cache.rows;
        if dout.len() != rows * n_out || x.len() != rows * n_in {
            return Err(Error::shape("mlp backward buffers disagree with cached forward"));
        }
        let mut grads = self.zeros_like();
        let mut dx = if want_input { Some(vec![T::zero(); rows * n_in]) } else { None };
        let (w1, w2) = (self.w1.data(), self.w2.data());
        let mut dpre = vec![T::zero(); n_h];
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let hr = &cache.hidden[r * n_h..(r + 1) * n_h];
            let dr = &dout[r * n_out..(r + 1) * n_out];
            dpre.iter_mut().for_each(|v| *v = T::zero());
            {
                let gw2 = grads.w2.data_mut();
                for (k, &g) in dr.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    let wk = &w2[k * n_h..(k + 1) * n_h];
                    let gk = &mut gw2[k * n_h..(k + 1) * n_h];
                    for j in 0..n_h {
                        gk[j] += g * hr[j];
                        dpre[j] += g * wk[j];
                    }
                }
            }
            for (gb, &g) in grads.b2.data_mut().iter_mut().zip(dr) {
                *gb += g;
            }
            for j in 0..n_h {
                dpre[j] *= T::one() - hr[j] * hr[j];
            }
            let gw1 = grads.w1.data_mut();
            for j in 0..n_h {
                let d = dpre[j];
                if d == T::zero() {
                    continue;
                }
                let gj = &mut gw1[j * n_in..(j + 1) * n_in];
                for (g, &xi) in gj.iter_mut().zip(xr) {
                    *g += d * xi;
                }
            }
            for (gb, &d) in grads.b1.data_mut().iter_mut().zip(&dpre) {
                *gb += d;
            }
            if let Some(dx) = dx.as_mut() {
                let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                for j in 0..n_h {
                    let d = dpre[j];
                    let wj = &w1[j * n_in..(j + 1) * n_in];
                    for (g, &w) in dxr.iter_mut().zip(wj) {
                        *g += d * w;
                    }
                }
            }
        }
        Ok((grads, dx))
    }

    /// Flattens all tensors in `w1, b1, w2, b2` order.
    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::new();
        for (_, t) in self.tensors() {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        let mut at = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            let src = flat
                .get(at..at + n)
                .ok_or_else(|| Error::shape("flat parameter vector too short"))?;
            t.data_mut().copy_from_slice(src);
            at += n;
        }
        if at != flat.len() {
            return Err(Error::shape("flat parameter vector too long"));
        }
        Ok(())
    }
}
