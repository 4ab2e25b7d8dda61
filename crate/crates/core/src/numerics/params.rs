use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Gradients, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        let previous = self.params.insert(name.clone(), Param { value, trainable });
        assert!(previous.is_none(), "parameter `{name}` registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a graph leaf; only trainable ones ask for
    /// gradients.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), graph.leaf(p.value.clone(), p.trainable)))
            .collect();
        Bound { vars }
    }

    /// Registers every parameter as a constant leaf.
    pub fn bind_constants(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), graph.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Pulls the gradient of every trainable parameter out of `grads`.
    /// Parameters the loss does not reach get a zero gradient.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> IndexMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let g = grads
                    .take(bound.get(name))
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Checks that `other` carries exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for ((a, pa), (b, pb)) in self.params.iter().zip(&other.params) {
            if a != b || pa.value.shape() != pb.value.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor `{a}` {:?} does not match `{b}` {:?}",
                    pa.value.shape(),
                    pb.value.shape()
                )));
            }
        }
        Ok(())
    }
}
