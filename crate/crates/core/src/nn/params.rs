use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

/// Ordered, named parameter collection of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    list: Vec<Param<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params { list: Vec::new() }
    }

    /// Adds a tensor drawn from `N(0, std²)`; `std == 0` gives zeros.
    pub fn add_normal(&mut self, name: String, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> ParamId {
        let len = shape.iter().product();
        let value = if std == 0.0 {
            vec![T::zero(); len]
        } else {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..len).map(|_| T::of(dist.sample(rng))).collect()
        };
        self.push(name, shape, value)
    }

    pub fn add_zeros(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let len = shape.iter().product();
        self.push(name, shape, vec![T::zero(); len])
    }

    fn push(&mut self, name: String, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        debug_assert!(self.list.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.list.push(Param { name, shape, value });
        ParamId(self.list.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.list[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.list[id.0].value
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.list[id.0].shape
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.list.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.list.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.list.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar weights and biases.
    pub fn scalar_count(&self) -> usize {
        self.list.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            list: self
                .list
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads {
            list: self.list.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.list.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers laid out like a [`Params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    list: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.list[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.list[id.0]
    }

    pub fn by_index(&self, i: usize) -> &[T] {
        &self.list[i]
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn zero(&mut self) {
        for g in &mut self.list {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.list.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.list.iter_mut().zip(&other.list) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.list {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}
