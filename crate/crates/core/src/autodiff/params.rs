use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owns every learnable tensor of a model. Layers hold [`ParamId`]s and
/// look up their graph handles through a [`Bound`] view.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Like [`ParamStore::bind`], but every parameter is a constant except
    /// `id`, which is replaced by the caller's `var`.
    pub fn bind_with(&self, g: &mut Graph, id: ParamId, var: Var) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| if i == id.0 { var } else { g.constant(t.clone()) })
                .collect(),
        }
    }

    /// Plain gradient-descent update from the gradients left on `g`.
    /// Parameters the loss did not reach are left untouched.
    pub fn sgd_step(&mut self, g: &Graph, bound: &Bound, lr: f64) -> Result<()> {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let Some(grad) = g.grad(bound.vars[i]) else { continue };
            if !grad.all_finite() {
                return Err(Error::Value(format!(
                    "non-finite gradient for parameter {}",
                    self.names[i]
                )));
            }
            for (w, d) in t.data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`], valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
