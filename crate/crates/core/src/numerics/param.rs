use super::tape::{Gradients, Tape, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let [r, c] = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Ordered parameter collection. Order is stable and defines checkpoint
/// layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn as_slice(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Registers every parameter value as a differentiable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(&p.value)).collect()
    }

    /// Adds the adjoints of `vars` (from [`ParamStore::bind`]) into the
    /// stored gradients.
    pub fn accumulate(&mut self, vars: &[Var], grads: &Gradients<T>) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::shape("accumulate", "var count differs from parameter count"));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}
