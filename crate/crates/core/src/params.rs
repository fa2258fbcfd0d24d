use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.tensors.iter().zip(&other.tensors) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter layout mismatch at {a} {:?} vs {b} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn init_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) {
        self.insert(name, Tensor::uniform(shape, -bound, bound, rng));
    }

    /// Glorot-uniform with explicit fan-in/fan-out.
    pub fn init_glorot<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.init_uniform(name, shape, bound, rng);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::ones(shape));
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Handles already on a tape, keyed by parameter name.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    /// Panics on an unknown name: layouts are validated when a store is
    /// built or loaded, so a miss here is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients keyed like the store.
    pub fn collect_grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
