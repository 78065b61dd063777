//! Named parameter storage and binding onto a tape.

use std::ops::Index;

use rand::Rng;

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.trainable.iter_mut().for_each(|t| *t = trainable);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Number of scalar entries in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(v, _)| v.len())
            .sum()
    }

    /// Puts every parameter on the tape: trainable ones as tracked leaves,
    /// the rest as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| if t { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Like [`bind`](Self::bind) but uses caller-provided nodes for some ids.
    pub fn bind_with(&self, tape: &mut Tape, overrides: &[(ParamId, Var)]) -> Bound {
        let vars = self
            .ids()
            .map(|id| match overrides.iter().find(|(o, _)| *o == id) {
                Some((_, v)) => *v,
                None => tape.constant(self.values[id.0].clone()),
            })
            .collect();
        Bound { vars }
    }

    /// Replaces values by name; every name must exist with the same shape.
    pub fn load_named<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Array)>) -> Result<()> {
        for (name, value) in entries {
            let id = self
                .id_of(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Shape {
                    op: "load_named",
                    lhs: self.values[id.0].shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }
}

/// Tape nodes for every entry of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform fan-in initialization: U(−1/√fan_in, 1/√fan_in).
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Array {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Array::from_parts(shape.to_vec(), data)
}
