use rand::Rng;

use super::array::{Array, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable arrays, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    arrays: Vec<Array<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::invalid("params", format!("duplicate parameter `{name}`")));
        }
        self.names.push(name.to_string());
        self.arrays.push(value);
        Ok(ParamId(self.arrays.len() - 1))
    }

    /// Uniform initialization in `[-s, s]` with `s = sqrt(1 / fan_in)`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let s = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-s..=s))).collect();
        self.insert(name, Array::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.arrays[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array<T>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array<T>] {
        &mut self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn zeros_like(&self) -> Vec<Array<T>> {
        self.arrays.iter().map(|a| Array::zeros(a.shape())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(Array::is_finite)
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }
}

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Array<T>]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let step_size = T::of(self.lr * bc2.sqrt() / bc1);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let eps = T::of(self.eps * bc2.sqrt());
        for (k, param) in store.arrays_mut().iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                *p -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
