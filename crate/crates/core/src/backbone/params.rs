use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Named parameter arrays in registration order, each with a gradient
/// accumulator of the same shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Values(Vec<f64>),
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let value: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..n).map(|_| T::of(dist.sample(rng))).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Shape(format!("{name}: {} init values for {n} entries", v.len())));
                }
                v.into_iter().map(T::of).collect()
            }
        };
        self.insert(name.to_string(), shape.to_vec(), value)
    }

    pub fn insert(&mut self, name: String, shape: Vec<usize>, value: Vec<T>) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!("{name}: shape {shape:?} holds {} values", value.len())));
        }
        let id = ParamId(self.params.len());
        let grad = vec![T::zero(); value.len()];
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, shape, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    /// Looks up a parameter and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self.id(name)?;
        if self.params[id.0].shape != shape {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                self.params[id.0].shape
            )));
        }
        Ok(id)
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds a gradient buffer into the accumulators.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += *b;
            }
        }
    }

    pub fn grads_like(&self) -> Grads<T> {
        Grads(self.params.iter().map(|p| vec![T::zero(); p.numel()]).collect())
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::of(v.as_f64())).collect(),
                    grad: p.grad.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Same layout, shapes and names as `other`.
    pub fn same_layout<U>(&self, other: &ParameterStore<U>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// A gradient buffer laid out like a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Vec<T>>);

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.0[id.0]
    }

    /// Disjoint mutable borrows of two buffers.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b);
        if a.0 < b.0 {
            let (lo, hi) = self.0.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.0.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.0.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().flatten().all(|g| *g == T::zero())
    }

    pub fn sq_norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_shapes_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::<f32>::new();
        let a = s.add("a", &[2, 3], Init::Normal(0.02), &mut rng).unwrap();
        assert_eq!(s.param(a).grad.len(), 6);
        assert!(s.add("a", &[1], Init::Zeros, &mut rng).is_err());
        assert!(s.expect("a", &[3, 2]).is_err());
        assert!(s.add("b", &[2], Init::Values(vec![1.0]), &mut rng).is_err());
        let d: ParameterStore<f64> = s.cast();
        assert!(d.same_layout(&s));
    }
}
