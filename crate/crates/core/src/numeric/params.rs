use std::collections::HashMap;

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to an entry of a [`ParamSet`]; stable for the lifetime of the set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameter tensors, each paired with a gradient accumulator of the same shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.entries.push(Param { name, value, grad });
        Ok(ParamId(id))
    }

    /// Weight `[rows × cols]` uniform in ±1/√cols.
    pub fn insert_weight(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn insert_bias(&mut self, name: impl Into<String>, len: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(&[len]))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not present")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        self.entries[id.0].value.data()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        self.entries[id.0].value.data_mut()
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        self.entries[id.0].grad.data()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        self.entries[id.0].grad.data_mut()
    }

    pub fn entry(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| &self.entries[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(T::zero());
        }
    }

    /// Fresh zeroed gradient buffer aligned with this set.
    pub fn gradients(&self) -> Gradients<T> {
        Gradients {
            tensors: self
                .entries
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        if grads.tensors.len() != self.entries.len() {
            return Err(Error::Dimension(format!(
                "gradient buffer has {} tensors, parameter set has {}",
                grads.tensors.len(),
                self.entries.len()
            )));
        }
        for (p, g) in self.entries.iter_mut().zip(&grads.tensors) {
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn values_equal(&self, other: &ParamSet<T>, prefix: &str) -> bool {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .all(|p| other.get(&p.name).is_some_and(|q| q.value == p.value))
    }
}

/// Gradient buffer detached from a [`ParamSet`], so several rollouts can
/// accumulate independently before being merged in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        self.tensors[id.0].data()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        self.tensors[id.0].data_mut()
    }

    pub fn add(&mut self, other: &Gradients<T>) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_zero(&self, id: ParamId) -> bool {
        self.tensors[id.0].data().iter().all(|v| *v == T::zero())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn names_are_unique_and_grads_match_shape() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = seeded(1);
        let w = ps.insert_weight("w", 3, 4, &mut rng).unwrap();
        assert!(ps.insert_bias("w", 3).is_err());
        assert_eq!(ps.entry(w).grad.shape(), ps.entry(w).value.shape());
        let bound = 0.5;
        assert!(ps.value(w).iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn accumulate_adds_in_place() {
        let mut ps = ParamSet::<f64>::new();
        let b = ps.insert_bias("b", 2).unwrap();
        let mut g = ps.gradients();
        g.get_mut(b).copy_from_slice(&[1.0, 2.0]);
        ps.accumulate(&g).unwrap();
        ps.accumulate(&g).unwrap();
        assert_eq!(ps.grad(b), &[2.0, 4.0]);
    }
}
