//! Named parameter storage shared by the model and the optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Ordered map from parameter name to value. Order is insertion order and is
/// what checkpoints serialize.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: IndexMap<String, Arc<Tensor>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(Arc::as_ref)
    }

    /// Mutable access; copies the tensor only if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Registers every parameter on `tape`.
    pub fn attach(&self, tape: &mut Tape) -> Result<Bound> {
        self.attach_where(tape, |_| true)
    }

    /// Registers the parameters whose names satisfy `keep`.
    pub fn attach_where(&self, tape: &mut Tape, keep: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = HashMap::new();
        for (name, value) in &self.entries {
            if keep(name) {
                vars.insert(name.clone(), tape.param(name, Arc::clone(value))?);
            }
        }
        Ok(Bound { vars })
    }

    /// Weight matrix `rows×cols` drawn from N(0, 0.02²).
    pub fn init_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(
            name,
            Tensor::new(vec![rows, cols], data).expect("positive dims"),
        );
    }

    pub fn init_const(&mut self, name: &str, len: usize, value: f64) {
        self.insert(name, Tensor::filled(&[len], value));
    }
}

/// Tape vars of attached parameters, looked up by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not attached")))
    }
}
