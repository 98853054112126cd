use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Named trainable parameters. Iteration is sorted by name, which fixes the
/// checkpoint blob layout and the optimizer's visiting order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamRegistry<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = value);
        }
    }
}

/// Gradient buffers keyed like a [`ParamRegistry`]; parameters a loss does
/// not reach keep a zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(registry: &ParamRegistry<T>) -> Self {
        Self {
            grads: registry
                .iter()
                .map(|(k, v)| (k.to_string(), vec![T::zero(); v.len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: &[T]) -> Result<()> {
        let buf = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        for (b, g) in buf.iter_mut().zip(grad) {
            *b = *b + *g;
        }
        Ok(())
    }

    pub fn add(&mut self, other: &Gradients<T>) -> Result<()> {
        for (name, g) in &other.grads {
            self.accumulate(name, g)?;
        }
        Ok(())
    }

    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Seeded parameter initializer.
///
/// Draws come from SplitMix64 (Steele, Lea & Flood 2014: a 64-bit Weyl
/// sequence with increment `0x9E3779B97F4A7C15` passed through a
/// xor-shift-multiply finalizer), so a seed fixes every value bit-for-bit.
/// Matrices use Glorot-uniform `U(-a, a)` with `a = sqrt(6 / (fan_in +
/// fan_out))`; biases are zero.
pub struct Initializer {
    rng: SplitMix64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SplitMix64::seed_from_u64(seed),
        }
    }

    /// `fan_in x fan_out` matrix.
    pub fn glorot<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(fan_in, fan_out, |_, _| T::of(self.rng.gen_range(-a..a)))
    }

    pub fn uniform<T: Scalar>(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
        Tensor::from_fn(rows, cols, |_, _| T::of(self.rng.gen_range(-bound..bound)))
    }

    pub fn zeros<T: Scalar>(&mut self, n: usize) -> Tensor<T> {
        Tensor::zeros([1, n])
    }

    pub fn ones<T: Scalar>(&mut self, n: usize) -> Tensor<T> {
        Tensor::full([1, n], T::one())
    }
}
