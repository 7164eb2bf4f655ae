use std::collections::HashMap;
use std::ops::Index;

use super::graph::{Gradients, Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

/// Parameters bound as leaves of one graph.
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Insert a tensor drawn uniformly from `[-scale, scale)`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let t = init_uniform(&[rows, cols], rng, -scale, scale)?;
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a borrowed, differentiable leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        Bound(self.params.iter().map(|p| g.borrowed(&p.value, true)).collect())
    }

    /// Same as [`ParamSet::bind`] but without gradient tracking.
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        Bound(self.params.iter().map(|p| g.borrowed(&p.value, false)).collect())
    }

    /// One gradient tensor per parameter, zero where unreachable.
    pub fn collect_grads(&self, grads: &Gradients, bound: &Bound) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(bound.vars())
            .map(|(p, &v)| grads.get_or_zeros(v, p.value.shape()))
            .collect()
    }
}

/// Tensor with entries uniform in `[lo, hi)`.
pub fn init_uniform(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Result<Tensor> {
    if shape.is_empty() {
        return Err(Error::invalid("init_uniform: empty shape"));
    }
    if lo >= hi {
        return Err(Error::invalid(format!("init_uniform: lo {lo} >= hi {hi}")));
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.range(lo, hi)).collect();
    Tensor::from_shape(shape, data)
}
