use std::collections::HashMap;

use super::{Real, RngStream, Tensor};
use crate::error::{GilaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model weight with its gradient accumulator and Adam moments.
///
/// Non-trainable entries (batch-norm running statistics) live here too so
/// checkpoints capture them; the optimizer skips them.
#[derive(Debug, Clone)]
pub struct Parameter<R> {
    pub name: String,
    pub tensor: Tensor<R>,
    pub grad: Vec<R>,
    pub adam_m: Vec<R>,
    pub adam_v: Vec<R>,
    pub step_count: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<R> {
    params: Vec<Parameter<R>>,
    by_name: HashMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<R>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(GilaError::config(format!("duplicate parameter name {name}")));
        }
        let n = tensor.len();
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            tensor,
            grad: vec![R::zero(); n],
            adam_m: vec![R::zero(); n],
            adam_v: vec![R::zero(); n],
            step_count: 0,
            trainable,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Xavier-uniform `[fan_in, fan_out]` matrix.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| R::of((2.0 * rng.uniform() - 1.0) * bound))
            .collect();
        self.add(name, Tensor::new(&[fan_in, fan_out], data)?, true)
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut RngStream,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| R::of(rng.normal() * std)).collect();
        self.add(name, Tensor::new(shape, data)?, true)
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
        trainable: bool,
    ) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, R::of(value)), trainable)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<R> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<R>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = R::zero());
        }
    }

    pub fn set_value(&mut self, id: ParamId, tensor: Tensor<R>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(GilaError::shape("set_value", p.tensor.shape(), tensor.shape()));
        }
        p.tensor = tensor;
        Ok(())
    }

    /// Values cast to another precision; optimizer state is reset.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.tensor.cast(), p.trainable)
                .expect("names are unique in the source store");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add_const("a.w", &[2], 0.0, true).unwrap();
        assert!(s.add_const("a.w", &[2], 0.0, true).is_err());
        assert_eq!(s.id("a.w").map(ParamId::index), Some(0));
    }
}
