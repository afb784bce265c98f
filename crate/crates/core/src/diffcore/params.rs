use crate::diffcore::DenseGrid;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: DenseGrid<T>,
    grad: DenseGrid<T>,
}

/// Named parameter tensors, each paired with a same-shaped gradient buffer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: DenseGrid<T>) -> Result<()> {
        if self.position(name).is_some() {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let grad = value.zeros_like();
        self.entries.push(Entry { name: name.to_string(), value, grad });
        Ok(())
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    fn entry(&self, name: &str) -> Result<&Entry<T>> {
        self.position(name)
            .map(|i| &self.entries[i])
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    fn entry_mut(&mut self, name: &str) -> Result<&mut Entry<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i]),
            None => Err(Error::config(format!("unknown parameter {name}"))),
        }
    }

    pub fn value(&self, name: &str) -> Result<&DenseGrid<T>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut DenseGrid<T>> {
        Ok(&mut self.entry_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&DenseGrid<T>> {
        Ok(&self.entry(name)?.grad)
    }

    /// Adds `g` into the accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, g: &DenseGrid<T>) -> Result<()> {
        let entry = self.entry_mut(name)?;
        entry.grad.add_assign(g).map_err(|e| Error::shape(format!("{name}: {e}")))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, factor: T) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Visits `(name, value, grad)` triples in insertion order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut DenseGrid<T>, &DenseGrid<T>)) {
        for e in &mut self.entries {
            f(&e.name, &mut e.value, &e.grad);
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn advance(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn grad_norm(&self) -> T {
        let mut acc = T::zero();
        for e in &self.entries {
            for &g in e.grad.data() {
                acc += g * g;
            }
        }
        acc.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_pair_with_values() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", DenseGrid::full(&[2, 3], 0.5)).unwrap();
        assert!(store.insert("w", DenseGrid::zeros(&[1])).is_err());
        assert_eq!(store.grad("w").unwrap().shape(), &[2, 3]);
        store.accumulate("w", &DenseGrid::full(&[2, 3], 1.5)).unwrap();
        assert!(store.accumulate("w", &DenseGrid::zeros(&[3, 2])).is_err());
        assert_eq!(store.grad("w").unwrap().sum(), 9.0);
        store.zero_grads();
        assert!(store.grad("w").unwrap().data().iter().all(|&g| g == 0.0));
    }
}
