//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Ordered collection of named tensors.  Order is insertion order and is
/// what the checkpoint and the optimizer iterate over.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Registers every tensor as a constant (no gradients recorded).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Bound {
        let vars = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Panics on an unknown name: parameter layout is fixed by the model
    /// config, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Points parameter `index` at another graph value.
    pub fn replace(&mut self, index: usize, var: Var) {
        self.vars[index] = var;
    }
}

/// Glorot-uniform weight of shape `[fan_in, fan_out]`.
pub fn glorot<F: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| F::c(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

/// Standard normal entries.
pub fn normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::c(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
