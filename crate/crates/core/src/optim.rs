//! Adam with decoupled weight decay over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::diffcore::{DenseGrid, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-4, betas: [0.9, 0.999], eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let [b1, b2] = self.betas;
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    moments: Vec<(DenseGrid<T>, DenseGrid<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW { config, moments: Vec::new() })
    }

    /// Applies one update using the store's accumulated gradients and
    /// advances its step counter.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.moments.is_empty() {
            store.for_each_mut(|_, v, _| self.moments.push((v.zeros_like(), v.zeros_like())));
        }
        if self.moments.len() != store.len() {
            return Err(Error::shape("parameter set changed between optimizer steps"));
        }
        let t = store.advance() as i32;
        let c = self.config;
        let (b1, b2) = (T::lit(c.betas[0]), T::lit(c.betas[1]));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps, wd) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.weight_decay));
        let mut k = 0;
        let moments = &mut self.moments;
        let mut err = None;
        store.for_each_mut(|name, value, grad| {
            let (m, v) = &mut moments[k];
            k += 1;
            if m.shape() != value.shape() {
                err = Some(Error::shape(format!("{name}: shape changed between optimizer steps")));
                return;
            }
            for (((x, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + eps) + wd * *x);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", DenseGrid::from_vec(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        s.accumulate("x", &DenseGrid::from_vec(&[2], vec![3.0, -0.5]).unwrap()).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        opt.step(&mut s).unwrap();
        let x = s.value("x").unwrap().data().to_vec();
        assert!((x[0] - (1.0 - 2e-4)).abs() < 1e-10);
        assert!((x[1] - (-2.0 + 2e-4)).abs() < 1e-10);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", DenseGrid::from_vec(&[3], vec![2.0, -1.0, 0.5]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..AdamWConfig::default() }).unwrap();
        for _ in 0..500 {
            s.zero_grads();
            let g = s.value("x").unwrap().scale(2.0);
            s.accumulate("x", &g).unwrap();
            opt.step(&mut s).unwrap();
        }
        assert!(s.value("x").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", DenseGrid::from_vec(&[1], vec![4.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..AdamWConfig::default() }).unwrap();
        opt.step(&mut s).unwrap();
        // zero gradient: only the decay term acts
        assert!((s.value("x").unwrap().data()[0] - (4.0 - 0.1 * 0.5 * 4.0)).abs() < 1e-12);
        assert!(AdamW::<f64>::new(AdamWConfig { lr: -1.0, ..AdamWConfig::default() }).is_err());
    }
}
