//! Named, trainable parameter storage with seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Other,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-bound, bound)
    Uniform(f64),
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    FanIn(usize),
    /// He-uniform for ReLU convolutions: U(-sqrt(6/fan_in), sqrt(6/fan_in))
    HeUniform(usize),
}

impl Init {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let bound = match *self {
            Init::Zeros => return vec![0.0; n],
            Init::Ones => return vec![1.0; n],
            Init::Uniform(b) => b,
            Init::FanIn(f) => 1.0 / (f.max(1) as f64).sqrt(),
            Init::HeUniform(f) => (6.0 / f.max(1) as f64).sqrt(),
        };
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
    }
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    group: ParamGroup,
}

/// Parameters keyed by dotted path, in sorted order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates and registers a new parameter.
    pub fn create<S: Into<Shape>>(
        &mut self,
        name: impl Into<String>,
        shape: S,
        init: Init,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(contract!("duplicate parameter name {name}"));
        }
        let shape: Shape = shape.into();
        let values = init.sample(shape.elem_count(), rng);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.insert(
            name,
            Entry {
                var: var.clone(),
                group,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|e| e.group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, ParamGroup)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.var, e.group))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.values().map(|e| e.var.clone()).collect()
    }

    pub fn group_vars(&self, group: ParamGroup) -> Vec<Var> {
        self.entries
            .values()
            .filter(|e| e.group == group)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|e| e.var.elem_count()).sum()
    }

    /// Overwrites a parameter in place, checking the shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| contract!("unknown parameter {name}"))?;
        if entry.var.shape() != value.shape() {
            return Err(contract!(
                "shape mismatch for {name}: have {:?}, got {:?}",
                entry.var.shape(),
                value.shape()
            ));
        }
        entry
            .var
            .set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Sets every parameter of this store to the values in `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var, _) in other.iter() {
            self.assign(name, var.as_tensor())?;
        }
        Ok(())
    }

    /// Re-draws every parameter from U(-bound, bound); used by tests that
    /// need non-degenerate gates.
    pub fn randomize(&self, bound: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        for e in self.entries.values() {
            let shape = e.var.shape().clone();
            let values = Init::Uniform(bound).sample(shape.elem_count(), rng);
            let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
            e.var.set(&t)?;
        }
        Ok(())
    }

    /// Detached snapshot of all values (for comparisons and checkpoints).
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }
}

/// Joins path segments with dots.
pub(crate) fn path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
