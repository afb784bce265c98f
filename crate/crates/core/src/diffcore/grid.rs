use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major N-dimensional array of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("grid needs at least one axis"));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!("axis {axis} has zero extent in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> DenseGrid<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = check_shape(shape).expect("valid grid shape");
        DenseGrid { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(DenseGrid { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = check_shape(shape).expect("valid grid shape");
        DenseGrid { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        DenseGrid { shape: self.shape.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    /// Flat offset of a multi-index; panics when out of range.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            assert!(i < extent, "index {index:?} out of range for {:?}", self.shape);
            flat = flat * extent + i;
        }
        flat
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!("{what}: expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseGrid { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: T, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.first_non_finite() {
            Some(index) => Err(Error::NonFinite { what: what.to_string(), index }),
            None => Ok(()),
        }
    }

    /// Sums over `axes`, accumulating in ascending flat-index order so the
    /// result is bit-reproducible. Reduced axes are removed; reducing every
    /// axis yields shape `[1]`. An empty axis list returns a copy.
    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Self> {
        if axes.is_empty() {
            return Ok(self.clone());
        }
        let mut reduced = vec![false; self.ndim()];
        for &axis in axes {
            if axis >= self.ndim() {
                return Err(Error::shape(format!("axis {axis} out of range for {:?}", self.shape)));
            }
            if reduced[axis] {
                return Err(Error::shape(format!("axis {axis} listed twice")));
            }
            reduced[axis] = true;
        }
        let kept: Vec<usize> = (0..self.ndim()).filter(|&a| !reduced[a]).collect();
        let out_shape: Vec<usize> =
            if kept.is_empty() { vec![1] } else { kept.iter().map(|&a| self.shape[a]).collect() };
        let mut out = DenseGrid::zeros(&out_shape);
        let mut out_strides = vec![0usize; self.ndim()];
        let mut stride = 1;
        for &axis in kept.iter().rev() {
            out_strides[axis] = stride;
            stride *= self.shape[axis];
        }
        let mut index = vec![0usize; self.ndim()];
        for &value in &self.data {
            let target: usize = index.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
            out.data[target] += value;
            for axis in (0..self.ndim()).rev() {
                index[axis] += 1;
                if index[axis] < self.shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> DenseGrid<U> {
        DenseGrid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        }
    }
}
