//! Per-voxel decoder, occupancy cross-entropy and IoU metrics.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DenseGrid, Mlp, MlpCache};
use crate::error::{Error, Result};
use crate::scalar::{softmax_into, Real};

#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    cache: MlpCache<T>,
}

fn split_channels<T: Real>(x: &DenseGrid<T>, what: &str) -> Result<([usize; 3], usize)> {
    match x.shape() {
        &[h, w, z, c] => Ok(([h, w, z], c)),
        other => Err(Error::shape(format!("{what}: expected H×W×Z×C, got {other:?}"))),
    }
}

/// Logits `H×W×Z×(S+1)` from voxel features `H×W×Z×C`.
pub fn decode<T: Real>(features: &DenseGrid<T>, mlp: &Mlp<T>) -> Result<(DenseGrid<T>, DecodeCache<T>)> {
    let ([h, w, z], c) = split_channels(features, "decoder input")?;
    if c != mlp.inputs() {
        return Err(Error::shape(format!("decoder expects {} channels, got {c}", mlp.inputs())));
    }
    let (out, cache) = mlp.forward(features.data())?;
    Ok((DenseGrid::from_vec(&[h, w, z, mlp.outputs()], out)?, DecodeCache { cache }))
}

impl<T: Real> DecodeCache<T> {
    pub fn backward(&self, mlp: &Mlp<T>, features: &DenseGrid<T>, dlogits: &DenseGrid<T>) -> Result<(Mlp<T>, DenseGrid<T>)> {
        let (g, dx) = mlp.backward(features.data(), &self.cache, dlogits.data(), true)?;
        Ok((g, DenseGrid::from_vec(features.shape(), dx.expect("requested input gradient"))?))
    }
}

pub fn probabilities<T: Real>(logits: &DenseGrid<T>) -> Result<DenseGrid<T>> {
    let (_, k) = split_channels(logits, "logits")?;
    let mut out = logits.zeros_like();
    for (l, p) in logits.data().chunks_exact(k).zip(out.data_mut().chunks_exact_mut(k)) {
        softmax_into(l, p);
    }
    Ok(out)
}

fn check_labels<T: Real>(logits: &DenseGrid<T>, labels: &[u8]) -> Result<usize> {
    let (ext, k) = split_channels(logits, "logits")?;
    if labels.len() != ext.iter().product::<usize>() {
        return Err(Error::shape("label grid does not match logits"));
    }
    if labels.iter().any(|&l| l as usize >= k) {
        return Err(Error::shape(format!("label outside 0..{k}")));
    }
    Ok(k)
}

/// Mean negative log-probability of the true class, via log-sum-exp.
pub fn occupancy_ce<T: Real>(logits: &DenseGrid<T>, labels: &[u8]) -> Result<T> {
    let k = check_labels(logits, labels)?;
    let mut acc = T::zero();
    for (l, &y) in logits.data().chunks_exact(k).zip(labels) {
        let m = l.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + l.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
        acc += lse - l[y as usize];
    }
    Ok(acc / T::from_usize_lossy(labels.len()))
}

/// `∂ occupancy_ce / ∂ logits = (softmax − onehot) / N`.
pub fn occupancy_ce_grad<T: Real>(logits: &DenseGrid<T>, labels: &[u8]) -> Result<DenseGrid<T>> {
    let k = check_labels(logits, labels)?;
    let mut g = probabilities(logits)?;
    let inv = T::one() / T::from_usize_lossy(labels.len());
    for (p, &y) in g.data_mut().chunks_exact_mut(k).zip(labels) {
        p[y as usize] -= T::one();
        p.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(g)
}

/// Argmax per voxel; ties go to the lower class id.
pub fn predict_labels<T: Real>(logits: &DenseGrid<T>) -> Result<Vec<u8>> {
    let (_, k) = split_channels(logits, "logits")?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|l| {
            let mut best = 0;
            for (i, &x) in l.iter().enumerate() {
                if x > l[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect())
}

/// Per-class intersection/union counts accumulated over any number of grids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub occupied_intersection: u64,
    pub occupied_union: u64,
}

impl Confusion {
    /// For classes `0..=classes`.
    pub fn new(classes: usize) -> Self {
        Confusion { intersection: vec![0; classes + 1], union: vec![0; classes + 1], occupied_intersection: 0, occupied_union: 0 }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("prediction and ground truth differ in size"));
        }
        let k = self.intersection.len();
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::shape(format!("class id beyond {}", k - 1)));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
            let (po, to) = (p != 0, t != 0);
            if po && to {
                self.occupied_intersection += 1;
            }
            if po || to {
                self.occupied_union += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self, dynamic: &[bool]) -> MetricsReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let mean = |keep: &dyn Fn(usize) -> bool| {
            let vals: Vec<f64> = per_class.iter().enumerate().skip(1).filter(|(s, _)| keep(*s)).filter_map(|(_, v)| *v).collect();
            if vals.is_empty() {
                1.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let miou = mean(&|_| true);
        let miou_d = mean(&|s| dynamic.get(s).copied().unwrap_or(false));
        let iou = if self.occupied_union == 0 { 1.0 } else { self.occupied_intersection as f64 / self.occupied_union as f64 };
        MetricsReport { per_class_iou: per_class, miou, miou_d, iou }
    }
}

/// IoU values in `[0, 1]`. Classes absent from both prediction and truth
/// are `None` and left out of the means; an empty mean counts as 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub miou_d: f64,
    pub iou: f64,
}

pub fn evaluate<T: Real>(logits: &DenseGrid<T>, truth: &[u8], dynamic: &[bool]) -> Result<MetricsReport> {
    let (_, k) = split_channels(logits, "logits")?;
    let mut c = Confusion::new(k - 1);
    c.add(&predict_labels(logits)?, truth)?;
    Ok(c.report(dynamic))
}
