use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameters and buffers of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_name(&self, name: &str) -> Result<()> {
        let taken = self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|b| b.name == name);
        if taken {
            return Err(Error::Shape(format!("duplicate parameter name {name:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.check_name(name)?;
        let n = value.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Glorot-uniform initialized parameter with the given fans.
    pub fn add_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(rng.random_range(-limit..limit))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        self.check_name(name)?;
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total trainable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Every parameter and buffer as (name, tensor), parameters first.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
            .collect()
    }

    /// Overwrites the tensor stored under `name` (parameter or buffer).
    pub fn set_named(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .map(|p| (&p.name, &mut p.value))
            .chain(self.buffers.iter_mut().map(|b| (&b.name, &mut b.value)))
            .find(|(n, _)| n.as_str() == name);
        match slot {
            Some((_, v)) if v.shape() == value.shape() => {
                *v = value;
                Ok(())
            }
            Some((_, v)) => Err(Error::Shape(format!(
                "{name}: stored shape {:?}, loaded {:?}",
                v.shape(),
                value.shape()
            ))),
            None => Err(Error::Validation(format!("unknown parameter {name:?}"))),
        }
    }

    /// Snapshot of values only (no optimizer state), for best-epoch restore.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| p.value.clone())
            .chain(self.buffers.iter().map(|b| b.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: Vec<Tensor<T>>) {
        assert_eq!(snapshot.len(), self.params.len() + self.buffers.len(), "snapshot size");
        let mut it = snapshot.into_iter();
        for p in &mut self.params {
            p.value = it.next().expect("param");
        }
        for b in &mut self.buffers {
            b.value = it.next().expect("buffer");
        }
    }

    /// Converts every tensor to another element type; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    first_moment: vec![U::zero(); p.value.len()],
                    second_moment: vec![U::zero(); p.value.len()],
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
        }
    }
}

/// Deterministic initializer stream for a graph.
pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.add("w", Tensor::zeros(&[2])).is_err());
        assert!(store.add_buffer("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(store.find("w"), Some(ParamId(0)));
    }

    #[test]
    fn glorot_within_limit() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(1);
        let id = store.add_glorot("w", &[8, 4], 8, 4, &mut rng).unwrap();
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(store.get(id).value.data().iter().all(|v| v.abs() <= limit));
    }
}
