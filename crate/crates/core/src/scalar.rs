//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numerically stable softmax of `logits` written into `out`.
pub fn softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Vector-Jacobian product of softmax: `dl = p ⊙ (dp − ⟨p, dp⟩)`.
pub fn softmax_backward_into<T: Real>(probs: &[T], dprobs: &[T], dlogits: &mut [T]) {
    let inner: T = probs.iter().zip(dprobs).map(|(&p, &g)| p * g).sum();
    for ((dl, &p), &g) in dlogits.iter_mut().zip(probs).zip(dprobs) {
        *dl = p * (g - inner);
    }
}
