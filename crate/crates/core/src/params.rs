//! Named parameter storage and tape binding.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names ("g.stage0.
//! conv1.weight"). A [`Session`] copies them onto a tape as leaves on first
//! use, caching the binding so every reference within one forward pass
//! shares a single node. Iteration order is insertion order everywhere,
//! which keeps optimizer updates and checkpoints deterministic.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid("params", format!("duplicate parameter {name}")));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter {name}")))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::invalid(
                "params",
                format!("shape change for {name}: {:?} -> {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn total_elements(&self) -> u64 {
        self.entries.values().map(|t| t.numel() as u64).sum()
    }

    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.map_convert::<U>()))
            .collect();
        ParamStore { entries }
    }
}

/// Which bound parameters receive gradients.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    None,
    Prefix(String),
}

impl Trainable {
    fn admits(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefix(p) => name.starts_with(p.as_str()),
        }
    }
}

/// One forward pass worth of parameter bindings onto a tape.
pub struct Session<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    trainable: Trainable,
    bound: IndexMap<String, Var>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, trainable: Trainable) -> Self {
        Session { tape, store, trainable, bound: IndexMap::new() }
    }

    /// Binds a parameter as a tape leaf, reusing the node on repeat lookups.
    pub fn bind(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let var = self.tape.leaf(value, self.trainable.admits(name));
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Bound parameters that receive gradients, in binding order.
    pub fn trainable_bound(&self) -> Vec<(String, Var)> {
        self.bound
            .iter()
            .filter(|(_, v)| self.tape.requires_grad(**v))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(store.insert("a.w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn set_preserves_shape() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("a.w", Tensor::zeros(&[2, 3])).unwrap();
        assert!(store.set("a.w", Tensor::zeros(&[3, 2])).is_err());
        store.set("a.w", Tensor::filled(&[2, 3], 1.0)).unwrap();
        assert_eq!(store.get("a.w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn binding_is_cached_and_filtered() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("g.w", Tensor::zeros(&[2])).unwrap();
        store.insert("d.w", Tensor::zeros(&[2])).unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &store, Trainable::Prefix("g.".into()));
        let a = sess.bind("g.w").unwrap();
        let b = sess.bind("g.w").unwrap();
        assert_eq!(a, b);
        let d = sess.bind("d.w").unwrap();
        assert!(sess.tape.requires_grad(a));
        assert!(!sess.tape.requires_grad(d));
        let trainable = sess.trainable_bound();
        assert_eq!(trainable.len(), 1);
        assert_eq!(trainable[0].0, "g.w");
    }

    #[test]
    fn conversion_round_trips_exact_values() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[2], vec![0.5f32, -1.25]).unwrap()).unwrap();
        let as64 = store.convert::<f64>();
        assert_eq!(as64.get("w").unwrap().data(), &[0.5f64, -1.25]);
        assert_eq!(store.total_elements(), 2);
    }
}
