//! Named trainable parameters.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Parameter) -> Result<usize> {
        if self.index_of(&p.name).is_some() {
            return Err(NnError::Config(format!("duplicate parameter name {}", p.name)));
        }
        self.params.push(p);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a differentiable leaf, in order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(&p.value)).collect()
    }

    /// Adds the gradients of the bound leaves onto each parameter's `grad`.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            let Some(g) = grads.get(v) else { continue };
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b),
                None => p.grad = Some(Tensor::from_vec(p.value.shape(), g.to_vec())),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Sum of all parameter values, used as a cheap fingerprint in tests and logs.
    pub fn checksum(&self) -> f64 {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p.value.sum())
            .sum()
    }
}

impl std::ops::Index<usize> for ParamSet {
    type Output = Parameter;

    fn index(&self, i: usize) -> &Parameter {
        &self.params[i]
    }
}

impl std::ops::IndexMut<usize> for ParamSet {
    fn index_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }
}

/// Xavier/Glorot uniform initialisation: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}
