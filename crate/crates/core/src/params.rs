//! Named, ordered parameter storage shared by the backbone and fusion head.

use std::collections::HashMap;

use rand::Rng;

use crate::numerics::{DenseArray, Tape, Var};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<DenseArray>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter; panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[DenseArray] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DenseArray] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(DenseArray::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&'t self, tape: &'t Tape) -> BoundParams<'t> {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        BoundParams { set: self, vars }
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct BoundParams<'t> {
    set: &'t ParamSet,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        let i = *self
            .set
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> DenseArray {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    DenseArray::new(shape.to_vec(), data).expect("shape matches count")
}
