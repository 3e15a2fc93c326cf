use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{GradError, Gradients, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        Arc::make_mut(&mut self.index).insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    /// He-normal initialised weight with `fan_in` inputs.
    pub fn insert_he(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, Tensor::new(shape, data).expect("he init shape"));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, GradError> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| GradError::UnknownParam(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, GradError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(GradError::UnknownParam(name.to_owned())),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// Records every parameter on `tape`, tracked or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, tracked: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if tracked {
                    tape.var(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            index: Arc::clone(&self.index),
            vars,
        }
    }

    /// Names `vars` after this set's parameters; they must match in count
    /// and shape.
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>) -> Result<BoundParams<'t>, GradError> {
        if vars.len() != self.tensors.len() {
            return Err(GradError::shape("bind_vars", &[vars.len()], &[self.tensors.len()]));
        }
        for (v, t) in vars.iter().zip(&self.tensors) {
            if v.shape() != t.shape() {
                return Err(GradError::shape("bind_vars", &v.shape(), t.shape()));
            }
        }
        Ok(BoundParams {
            index: Arc::clone(&self.index),
            vars,
        })
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct BoundParams<'t> {
    index: Arc<HashMap<String, usize>>,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>, GradError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| GradError::UnknownParam(name.to_owned()))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients in parameter order; parameters the loss does not reach get
    /// zeros.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}
