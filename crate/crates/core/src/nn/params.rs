//! Named parameter storage with per-tensor optimizer state.

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Trainable; carries a squared-gradient cache of the same shape.
    Param,
    /// Updated outside the optimizer (e.g. running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub role: Role,
    pub value: Tensor<T>,
    /// Optimizer state; present exactly for [`Role::Param`] entries.
    pub cache: Option<Tensor<T>>,
}

/// All tensors of one model plus the seed it was initialised from and the
/// number of optimizer steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T = f32> {
    entries: Vec<Entry<T>>,
    pub rng_seed: u64,
    pub step: u64,
}

impl<T: Real> ModelParameters<T> {
    pub fn new(rng_seed: u64) -> Self {
        ModelParameters {
            entries: Vec::new(),
            rng_seed,
            step: 0,
        }
    }

    fn push(&mut self, name: String, role: Role, value: Tensor<T>) -> usize {
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        let cache = (role == Role::Param).then(|| Tensor::zeros(value.shape()));
        self.entries.push(Entry { name, role, value, cache });
        self.entries.len() - 1
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.push(name.into(), Role::Param, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.push(name.into(), Role::Buffer, value)
    }

    /// Adds a trainable tensor drawn uniformly from `±√(6 / (fan_in + fan_out))`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
        self.add_param(name, Tensor::new(shape.to_vec(), data).expect("finite init"))
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Entry<T> {
        &mut self.entries[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.value(i))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role == Role::Param)
            .map(|e| e.value.len())
            .sum()
    }

    /// Sets every tensor, caches included, to zero.
    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            e.value.data_mut().fill(T::zero());
            if let Some(c) = &mut e.cache {
                c.data_mut().fill(T::zero());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    role: e.role,
                    value: e.value.cast(),
                    cache: e.cache.as_ref().map(Tensor::cast),
                })
                .collect(),
            rng_seed: self.rng_seed,
            step: self.step,
        }
    }

    /// Content hash over names, shapes and values (not the caches).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks that `other` has the same names, roles and shapes.
    pub fn check_layout(&self, other: &ModelParameters<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.role != b.role || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn from_entries(entries: Vec<Entry<T>>, rng_seed: u64, step: u64) -> Self {
        ModelParameters { entries, rng_seed, step }
    }
}

/// Gradient buffers aligned with the entries of a [`ModelParameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ModelParameters<T>) -> Self {
        Gradients {
            tensors: params.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
        }
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    /// Two distinct gradients borrowed mutably at once; requires `i < j`.
    pub fn pair_mut(&mut self, i: usize, j: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert!(i < j, "pair_mut needs ascending indices");
        let (a, b) = self.tensors.split_at_mut(j);
        (&mut a[i], &mut b[0])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scale(&mut self, f: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }

    pub fn check_finite(&self, params: &ModelParameters<T>) -> Result<()> {
        for (t, e) in self.tensors.iter().zip(&params.entries) {
            t.check_finite(&format!("gradient of {}", e.name))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn every_param_has_matching_cache() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParameters::<f32>::new(0);
        p.add_glorot("w", &[3, 4], 4, 3, &mut rng);
        p.add_buffer("mean", Tensor::zeros(&[3]));
        assert_eq!(p.entries()[0].cache.as_ref().unwrap().shape(), &[3, 4]);
        assert!(p.entries()[1].cache.is_none());
        assert_eq!(p.num_trainable(), 12);
    }

    #[test]
    fn glorot_respects_limit_and_seed() {
        let build = |seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut p = ModelParameters::<f64>::new(seed);
            p.add_glorot("w", &[50, 10], 10, 50, &mut rng);
            p
        };
        let limit = (6.0f64 / 60.0).sqrt();
        let p = build(7);
        assert!(p.value(0).data().iter().all(|v| v.abs() <= limit));
        assert_eq!(p, build(7));
        assert_ne!(p.digest(), build(8).digest());
    }
}
