use std::cell::RefCell;
use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        assert!(!self.index.contains_key(&name), "parameter `{name}` registered twice");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    /// Registers a new tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        Ok(self.add(name, tensor))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, checking names and shapes match.
    pub fn load_from(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let id = self
                .index
                .get(&name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if self.tensors[id].shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    self.tensors[id].shape()
                )));
            }
            self.tensors[id] = tensor;
        }
        Ok(())
    }
}

/// Binds model parameters into one forward graph. Each parameter becomes a
/// leaf the first time it is used, so parameters a forward pass never touches
/// have no gradient.
pub struct Binder<'a> {
    graph: &'a Graph,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    differentiable: bool,
    dropout: Option<(f64, RefCell<&'a mut ChaCha8Rng>)>,
}

impl<'a> Binder<'a> {
    /// Differentiable binding without dropout.
    pub fn new(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Self { graph, store, bound: RefCell::new(vec![None; store.len()]), differentiable: true, dropout: None }
    }

    /// Read-only binding for inference; parameters enter as constants.
    pub fn inference(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Self { differentiable: false, ..Self::new(graph, store) }
    }

    /// Training binding with dropout drawn from `rng`.
    pub fn training(graph: &'a Graph, store: &'a ParamStore, rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { dropout: Some((rate, RefCell::new(rng))), ..Self::new(graph, store) }
    }

    /// Binding whose parameters are the given graph variables, one per store entry.
    pub fn from_vars(graph: &'a Graph, store: &'a ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Graph(format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        let b = Self::new(graph, store);
        *b.bound.borrow_mut() = vars.iter().copied().map(Some).collect();
        Ok(b)
    }

    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn param(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let t = self.store.get(id).clone();
            if self.differentiable {
                self.graph.leaf(t)
            } else {
                self.graph.constant(t)
            }
        })
    }

    pub fn dropout(&self, x: Var) -> Result<Var> {
        match &self.dropout {
            Some((rate, rng)) => self.graph.dropout(x, *rate, &mut **rng.borrow_mut()),
            None => Ok(x),
        }
    }

    /// Gradient per parameter id; `None` for parameters the pass never used.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        self.bound.borrow().iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}
