use crate::diffcore::DenseGrid;
use crate::error::{Error, Result};
use crate::scalar::Real;

const RELATIVE_FLOOR: f64 = 1e-2;
const ABSOLUTE_FLOOR: f64 = 1e-8;

/// A differentiable map between grids with a hand-written adjoint.
pub trait DiffOp<T: Real> {
    fn name(&self) -> &str;

    fn forward(&self, input: &DenseGrid<T>) -> Result<DenseGrid<T>>;

    /// Vector-Jacobian product: `Jᵀ(input) · cotangent`, shaped like `input`.
    fn adjoint(&self, input: &DenseGrid<T>, cotangent: &DenseGrid<T>) -> Result<DenseGrid<T>>;
}

/// Closure-backed [`DiffOp`].
pub struct FnOp<F, G> {
    name: String,
    forward: F,
    adjoint: G,
}

impl<F, G> FnOp<F, G> {
    pub fn new<T>(name: impl Into<String>, forward: F, adjoint: G) -> Self
    where
        T: Real,
        F: Fn(&DenseGrid<T>) -> Result<DenseGrid<T>>,
        G: Fn(&DenseGrid<T>, &DenseGrid<T>) -> Result<DenseGrid<T>>,
    {
        FnOp { name: name.into(), forward, adjoint }
    }
}

impl<T, F, G> DiffOp<T> for FnOp<F, G>
where
    T: Real,
    F: Fn(&DenseGrid<T>) -> Result<DenseGrid<T>>,
    G: Fn(&DenseGrid<T>, &DenseGrid<T>) -> Result<DenseGrid<T>>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, input: &DenseGrid<T>) -> Result<DenseGrid<T>> {
        (self.forward)(input)
    }

    fn adjoint(&self, input: &DenseGrid<T>, cotangent: &DenseGrid<T>) -> Result<DenseGrid<T>> {
        (self.adjoint)(input, cotangent)
    }
}

#[derive(Clone, Debug)]
pub struct VjpReport<T> {
    pub max_rel_error: T,
    pub max_abs_error: T,
    /// Flat input index where the relative error peaks.
    pub worst_index: usize,
    pub analytic: T,
    pub numeric: T,
}

/// Compares `op.adjoint` against central differences of `⟨cotangent, op(x)⟩`.
///
/// Each input element is perturbed by `step · max(|x_i|, 1)`. The scalar is
/// differenced element-wise before summation, which keeps cancellation error
/// proportional to the perturbed outputs only. The relative error of element
/// `i` is `|analytic − numeric| / max(|numeric_i|, 1e-2 · max|numeric|, 1e-8)`:
/// a difference quotient at this step carries roughly 1e-11 of roundoff, so
/// components far below the gradient's peak are held to that scale instead.
pub fn vjp_check<T: Real>(
    op: &dyn DiffOp<T>,
    input: &DenseGrid<T>,
    cotangent: &DenseGrid<T>,
    step: T,
) -> Result<VjpReport<T>> {
    if !(step > T::zero()) {
        return Err(Error::Precondition(format!("{}: step must be positive", op.name())));
    }
    let base = op.forward(input)?;
    base.check_finite(&format!("{} forward", op.name()))?;
    if base.shape() != cotangent.shape() {
        return Err(Error::shape(format!(
            "{}: cotangent {:?} vs output {:?}",
            op.name(),
            cotangent.shape(),
            base.shape()
        )));
    }
    let analytic = op.adjoint(input, cotangent)?;
    if analytic.shape() != input.shape() {
        return Err(Error::shape(format!(
            "{}: adjoint returned {:?} for input {:?}",
            op.name(),
            analytic.shape(),
            input.shape()
        )));
    }
    analytic.check_finite(&format!("{} adjoint", op.name()))?;

    let two = T::lit(2.0);
    let mut numeric = Vec::with_capacity(input.len());
    let mut probe = input.clone();
    for i in 0..input.len() {
        let x = input.data()[i];
        let h = step * x.abs().max(T::one());
        probe.data_mut()[i] = x + h;
        let plus = op.forward(&probe)?;
        plus.check_finite(&format!("{} forward (+h at {i})", op.name()))?;
        probe.data_mut()[i] = x - h;
        let minus = op.forward(&probe)?;
        minus.check_finite(&format!("{} forward (-h at {i})", op.name()))?;
        probe.data_mut()[i] = x;

        let mut acc = T::zero();
        for ((&p, &m), &c) in plus.data().iter().zip(minus.data()).zip(cotangent.data()) {
            acc += c * (p - m);
        }
        numeric.push(acc / (two * h));
    }

    let peak = numeric.iter().fold(T::zero(), |m, n| m.max(n.abs()));
    let floor = (T::lit(RELATIVE_FLOOR) * peak).max(T::lit(ABSOLUTE_FLOOR));
    let mut report = VjpReport {
        max_rel_error: T::zero(),
        max_abs_error: T::zero(),
        worst_index: 0,
        analytic: T::zero(),
        numeric: T::zero(),
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / n.abs().max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || i == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}

/// Moves every element at least `margin` away from the nearest integer, so
/// piecewise-linear operators are probed away from their kinks.
pub fn nudge_off_integers<T: Real>(grid: &mut DenseGrid<T>, margin: T) {
    for x in grid.data_mut() {
        let frac = *x - x.round();
        if frac.abs() < margin {
            *x = x.round() + if frac < T::zero() { -margin } else { margin } * T::lit(2.0);
        }
    }
}
