use crate::diffcore::{DenseGrid, Mlp, MlpCache, SeededRng};
use crate::error::{Error, Result};
use crate::scalar::{softmax_backward_into, softmax_into, Real};

pub const SIMPLEX_TOL: f64 = 1e-12;

/// `count` uniformly spaced metric depths over `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBins<T> {
    pub min: T,
    pub max: T,
    pub count: usize,
}

impl<T: Real> DepthBins<T> {
    pub fn new(min: T, max: T, count: usize) -> Result<Self> {
        if count == 0 || !(min > T::zero()) || !(max >= min) || (count > 1 && max == min) {
            return Err(Error::config(format!("bad depth bins [{min}, {max}] × {count}")));
        }
        Ok(DepthBins { min, max, count })
    }

    /// Metric spacing between consecutive bins.
    pub fn step(&self) -> T {
        if self.count == 1 {
            T::zero()
        } else {
            (self.max - self.min) / T::from_usize_lossy(self.count - 1)
        }
    }

    /// Metric depth of a continuous bin position.
    pub fn depth(&self, bin: T) -> T {
        self.min + bin * self.step()
    }

    /// Continuous bin position of a metric depth.
    pub fn bin_of(&self, depth: T) -> T {
        let step = self.step();
        if step == T::zero() {
            T::zero()
        } else {
            (depth - self.min) / step
        }
    }
}

fn check_simplex<T: Real>(values: &DenseGrid<T>, depth: usize, what: &str) -> Result<()> {
    let tol = T::lit(SIMPLEX_TOL);
    for (row, chunk) in values.data().chunks_exact(depth).enumerate() {
        let mut total = T::zero();
        for &p in chunk {
            if !(p >= T::zero() && p <= T::one()) {
                return Err(Error::Numerical(format!("{what}: weight {p} outside [0, 1] in row {row}")));
            }
            total += p;
        }
        if (total - T::one()).abs() > tol {
            return Err(Error::Numerical(format!("{what}: row {row} sums to {total}")));
        }
    }
    Ok(())
}

/// Per-pixel depth distribution `p_d`, shape `U×V×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryVolume<T> {
    values: DenseGrid<T>,
}

impl<T: Real> GeometryVolume<T> {
    pub fn new(values: DenseGrid<T>) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::shape(format!("geometry volume must be U×V×D, got {:?}", values.shape())));
        }
        check_simplex(&values, values.shape()[2], "geometry volume")?;
        Ok(GeometryVolume { values })
    }

    pub fn values(&self) -> &DenseGrid<T> {
        &self.values
    }

    /// The same distribution viewed as a single channel group.
    pub fn as_group_weights(&self) -> GroupWeights<T> {
        let s = self.values.shape();
        let values = self.values.clone().reshape(&[s[0], s[1], 1, s[2]]).expect("same length");
        GroupWeights { values }
    }
}

/// Per-pixel, per-group depth simplices `ω_{g,d}`, shape `U×V×G×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupWeights<T> {
    values: DenseGrid<T>,
}

impl<T: Real> GroupWeights<T> {
    pub fn new(values: DenseGrid<T>) -> Result<Self> {
        if values.ndim() != 4 {
            return Err(Error::shape(format!("group weights must be U×V×G×D, got {:?}", values.shape())));
        }
        check_simplex(&values, values.shape()[3], "group weights")?;
        Ok(GroupWeights { values })
    }

    pub fn values(&self) -> &DenseGrid<T> {
        &self.values
    }

    pub fn groups(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn depth_bins(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn into_inner(self) -> DenseGrid<T> {
        self.values
    }
}

/// The lift head `F_g`: per-pixel map from `C` features to `G·D` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftHeadParams<T> {
    pub mlp: Mlp<T>,
    pub groups: usize,
    pub depth_bins: usize,
}

impl<T: Real> LiftHeadParams<T> {
    pub fn zeros(channels: usize, hidden: usize, groups: usize, depth_bins: usize) -> Result<Self> {
        Self::check(channels, groups, depth_bins)?;
        Ok(LiftHeadParams { mlp: Mlp::zeros(channels, hidden, groups * depth_bins), groups, depth_bins })
    }

    pub fn init(channels: usize, hidden: usize, groups: usize, depth_bins: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::check(channels, groups, depth_bins)?;
        Ok(LiftHeadParams { mlp: Mlp::init(channels, hidden, groups * depth_bins, 1.0, rng), groups, depth_bins })
    }

    fn check(channels: usize, groups: usize, depth_bins: usize) -> Result<()> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!("{groups} groups do not divide {channels} channels")));
        }
        if depth_bins == 0 {
            return Err(Error::config("need at least one depth bin"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mlp.inputs()
    }
}

#[derive(Clone, Debug)]
pub struct LiftHeadCache<T> {
    cache: MlpCache<T>,
}

/// Softmax over depth of the head logits, independently per (pixel, group).
pub fn predict_group_weights<T: Real>(
    f_i: &DenseGrid<T>,
    params: &LiftHeadParams<T>,
) -> Result<(GroupWeights<T>, LiftHeadCache<T>)> {
    let c = params.channels();
    let (u, v) = match f_i.shape() {
        &[u, v, ch] if ch == c => (u, v),
        other => return Err(Error::shape(format!("image features {other:?}, expected U×V×{c}"))),
    };
    let (logits, cache) = params.mlp.forward(f_i.data())?;
    let d = params.depth_bins;
    let mut probs = vec![T::zero(); logits.len()];
    for (l, p) in logits.chunks_exact(d).zip(probs.chunks_exact_mut(d)) {
        softmax_into(l, p);
    }
    let values = DenseGrid::from_vec(&[u, v, params.groups, d], probs)?;
    Ok((GroupWeights { values }, LiftHeadCache { cache }))
}

impl<T: Real> LiftHeadCache<T> {
    /// Head-parameter gradients and optionally `∂L/∂f_i` from `∂L/∂ω`.
    pub fn backward(
        &self,
        params: &LiftHeadParams<T>,
        f_i: &DenseGrid<T>,
        weights: &GroupWeights<T>,
        dweights: &DenseGrid<T>,
        want_input: bool,
    ) -> Result<(Mlp<T>, Option<DenseGrid<T>>)> {
        dweights.expect_shape(weights.values.shape(), "group weight gradient")?;
        let d = params.depth_bins;
        let mut dlogits = vec![T::zero(); dweights.len()];
        for ((p, g), out) in weights
            .values
            .data()
            .chunks_exact(d)
            .zip(dweights.data().chunks_exact(d))
            .zip(dlogits.chunks_exact_mut(d))
        {
            softmax_backward_into(p, g, out);
        }
        let (grads, dx) = params.mlp.backward(f_i.data(), &self.cache, &dlogits, want_input)?;
        let dx = match dx {
            Some(v) => Some(DenseGrid::from_vec(f_i.shape(), v)?),
            None => None,
        };
        Ok((grads, dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{vjp_check, FnOp};

    fn features(seed: u64) -> DenseGrid<f64> {
        let mut rng = SeededRng::new(seed);
        DenseGrid::from_fn(&[4, 4, 8], |_| rng.normal())
    }

    #[test]
    fn zero_logits_are_uniform() {
        let params = LiftHeadParams::<f64>::zeros(8, 5, 2, 4).unwrap();
        let (w, _) = predict_group_weights(&features(1), &params).unwrap();
        assert_eq!(w.values().shape(), &[4, 4, 2, 4]);
        assert!(w.values().data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn saturated_logit_takes_all_mass() {
        let mut params = LiftHeadParams::<f64>::zeros(8, 5, 1, 6).unwrap();
        params.mlp.b2.data_mut()[3] = 50.0;
        let (w, _) = predict_group_weights(&features(1), &params).unwrap();
        for px in w.values().data().chunks_exact(6) {
            assert!(px[3] >= 1.0 - 1e-9);
        }
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(LiftHeadParams::<f64>::zeros(8, 5, 3, 4).is_err());
        assert!(LiftHeadParams::<f64>::zeros(8, 5, 4, 4).is_ok());
    }

    #[test]
    fn simplex_invariant_after_predict() {
        let mut rng = SeededRng::new(3);
        let mut params = LiftHeadParams::<f64>::init(8, 5, 4, 7, &mut rng).unwrap();
        params.mlp.w2.data_mut().iter_mut().for_each(|x| *x = 3.0 * rng.normal());
        let (w, _) = predict_group_weights(&features(2), &params).unwrap();
        assert!(GroupWeights::new(w.values().clone()).is_ok());
    }

    #[test]
    fn single_group_is_a_geometry_volume() {
        let mut rng = SeededRng::new(8);
        let params = LiftHeadParams::<f64>::init(8, 5, 1, 3, &mut rng).unwrap();
        let (w, _) = predict_group_weights(&features(2), &params).unwrap();
        let g = GeometryVolume::new(w.values().clone().reshape(&[4, 4, 3]).unwrap()).unwrap();
        assert_eq!(g.as_group_weights(), w);
    }

    #[test]
    fn head_adjoints() {
        let mut rng = SeededRng::new(21);
        let mut params = LiftHeadParams::<f64>::init(8, 5, 2, 3, &mut rng).unwrap();
        params.mlp.w2.data_mut().iter_mut().for_each(|x| *x = rng.normal());
        let f = features(22);
        let cot = DenseGrid::from_fn(&[4, 4, 2, 3], |_| rng.normal());
        let (pa, pb) = (params.clone(), params.clone());
        let op = FnOp::new(
            "group_weights/features",
            move |f: &DenseGrid<f64>| Ok(predict_group_weights(f, &pa)?.0.into_inner()),
            move |f: &DenseGrid<f64>, c: &DenseGrid<f64>| {
                let (w, cache) = predict_group_weights(f, &pb)?;
                Ok(cache.backward(&pb, f, &w, c, true)?.1.unwrap())
            },
        );
        assert!(vjp_check(&op, &f, &cot, 1e-5).unwrap().max_rel_error < 1e-6);
    }

    #[test]
    fn depth_bins_are_uniform() {
        let bins = DepthBins::new(1.0, 9.0, 17).unwrap();
        assert_eq!(bins.step(), 0.5);
        assert_eq!(bins.depth(4.0), 3.0);
        assert_eq!(bins.bin_of(3.0), 4.0);
        assert!(DepthBins::new(0.0, 9.0, 4).is_err());
    }
}
