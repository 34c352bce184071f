use std::collections::BTreeMap;

use super::{numel, Gradients, Rng, Tensor};
use crate::error::{Error, Result};

/// Initial value distribution for a declared parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Declaration of a parameter before any storage is allocated. Counting and
/// shape checks run on declarations so that large configurations never need
/// to be materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], trainable: bool, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            trainable,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Named parameters. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, tensor.with_requires_grad(trainable));
        Ok(())
    }

    /// Allocates and initializes every declared parameter, drawing from `rng`
    /// in declaration order.
    pub fn allocate(&mut self, specs: &[ParamSpec], rng: &mut Rng) -> Result<()> {
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
                Init::Normal(std) => Tensor::new(&spec.shape, rng.normal_vec(spec.numel(), std))?,
            };
            self.insert(spec.name.clone(), t, spec.trainable)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|t| !t.requires_grad())
    }

    pub fn set_trainable(&mut self, name: &str, on: bool) -> Result<()> {
        self.get_mut(name)?.set_requires_grad(on);
        Ok(())
    }

    /// Freezes every entry whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (_, t) in self.entries.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            t.set_requires_grad(false);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, _)| k.to_string())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|t| t.requires_grad()).count()
    }

    /// Number of frozen entries.
    pub fn frozen_count(&self) -> usize {
        self.len() - self.trainable_count()
    }

    /// Total scalar count across trainable entries.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn frozen_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|t| !t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds gradients into trainable entries; frozen entries ignore them.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let t = self.get_mut(name)?;
            if t.numel() != g.len() {
                return Err(Error::dim("accumulate", t.shape(), &[g.len()]));
            }
            t.accumulate_grad(g);
        }
        Ok(())
    }

    /// Replaces this store's values with `other`'s. Names, shapes and frozen
    /// flags must agree exactly.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Version(format!(
                "parameter table has {} entries, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for ((name, dst), (oname, src)) in self.entries.iter_mut().zip(other.entries.iter()) {
            if name != oname || dst.shape() != src.shape() {
                return Err(Error::Version(format!(
                    "parameter `{oname}` {:?} does not match model `{name}` {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
