//! Named trainable parameters with gradient slots.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::DenseArray;

pub struct ParamEntry {
    pub value: DenseArray,
    pub grad: DenseArray,
    /// Whether decoupled weight decay applies (false for biases and
    /// normalization parameters).
    pub decay: bool,
}

/// Ordered map from hierarchical parameter name to value + gradient slot.
/// Names are unique and shapes are fixed at registration.
#[derive(Default)]
pub struct ParameterStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: DenseArray, decay: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        let grad = DenseArray::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            ParamEntry { value, grad, decay },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    /// Replaces a value in place; the shape must match the registered one.
    pub fn set_value(&mut self, name: &str, value: DenseArray) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                detail: format!(
                    "'{name}' is {:?}, got {:?}",
                    entry.value.shape(),
                    value.shape()
                ),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    /// Clones all parameter values (used for best-epoch snapshots).
    pub fn snapshot(&self) -> Vec<(String, DenseArray)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(String, DenseArray)]) -> Result<()> {
        for (name, value) in snapshot {
            self.set_value(name, value.clone())?;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, in store order.
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' not bound to tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Registers every parameter of the store as a tape leaf.
pub fn bind_all(store: &ParameterStore, tape: &mut Tape) -> Result<Bindings> {
    let mut vars = IndexMap::new();
    for (name, entry) in store.iter() {
        vars.insert(name.to_string(), tape.leaf(entry.value.clone())?);
    }
    Ok(Bindings { vars })
}

/// Adds the tape gradients of all bound parameters into the store's
/// gradient slots. Parameters the tape never touched contribute exactly
/// zero.
pub fn accumulate_grads(store: &mut ParameterStore, tape: &Tape, binds: &Bindings) -> Result<()> {
    for (name, var) in binds.iter() {
        if let Some(g) = tape.grad(var) {
            let entry = store.entry_mut(name)?;
            for (dst, src) in entry.grad.data_mut().iter_mut().zip(g) {
                *dst += src;
            }
        }
    }
    Ok(())
}

/// Uniformly distributed values in (-bound, bound) from a seeded generator.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> DenseArray {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    DenseArray::new(shape.to_vec(), data).expect("uniform_init shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParameterStore::new();
        store.register("w", DenseArray::zeros(&[2]), true).unwrap();
        assert!(store.register("w", DenseArray::zeros(&[2]), true).is_err());
    }

    #[test]
    fn set_value_enforces_shape() {
        let mut store = ParameterStore::new();
        store.register("w", DenseArray::zeros(&[2, 2]), true).unwrap();
        assert!(store.set_value("w", DenseArray::zeros(&[4])).is_err());
        assert!(store.set_value("w", DenseArray::zeros(&[2, 2])).is_ok());
    }

    #[test]
    fn unused_parameter_grad_stays_zero() {
        let mut store = ParameterStore::new();
        store.register("used", DenseArray::scalar(3.0), true).unwrap();
        store.register("unused", DenseArray::scalar(1.0), true).unwrap();
        let mut tape = Tape::new();
        let binds = bind_all(&store, &mut tape).unwrap();
        let x = binds.var("used").unwrap();
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        accumulate_grads(&mut store, &tape, &binds).unwrap();
        assert_eq!(store.get("used").unwrap().grad.data(), &[6.0]);
        assert_eq!(store.get("unused").unwrap().grad.data(), &[0.0]);
    }

    #[test]
    fn uniform_init_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let x = uniform_init(&mut a, &[3, 3], 0.5);
        let y = uniform_init(&mut b, &[3, 3], 0.5);
        assert_eq!(x.data(), y.data());
        assert!(x.data().iter().all(|v| v.abs() < 0.5));
    }
}
