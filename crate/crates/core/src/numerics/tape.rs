use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Grid;
use crate::error::{ensure, Error, Result};

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Grid,
    pub grad: Grid,
}

impl Parameter {
    pub fn new(value: Grid) -> Self {
        let (h, w, c) = value.shape();
        Self {
            value,
            grad: Grid::zeros(h, w, c),
        }
    }
}

/// Named parameters, iterated in lexicographic order so that serialization
/// and optimizer updates are deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Grid) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Grid> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Grid> {
        Ok(&self.get(name)?.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries over all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradients. Unknown names are an error.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in &grads.0 {
            let p = self.get_mut(name)?;
            p.value.check_same_shape(g, name)?;
            p.grad.add_assign(g);
        }
        Ok(())
    }

    /// Merges all parameters of `other` into `self`, replacing on collision.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }
}

/// Gradients keyed by parameter name, as produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Grid>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.0.get(name)
    }

    /// Sums `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Inputs to a node's backward rule.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Grid,
    pub inputs: Vec<&'a Grid>,
    pub output: &'a Grid,
    /// Which inputs actually need a gradient.
    pub needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Grid>>>;

struct Node {
    value: Grid,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<String>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Grid) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param: None,
            requires_grad: false,
        })
    }

    /// Leaf holding a copy of parameter `name`. Repeated calls return the
    /// same leaf, so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_leaves.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param: Some(name.to_string()),
            requires_grad: true,
        });
        self.param_leaves.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Grid {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. `backward` returns one optional gradient per
    /// input, in the same order as `inputs`.
    pub fn op(
        &mut self,
        inputs: &[Var],
        value: Grid,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Grid>> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            param: None,
            requires_grad,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`; returns the gradient of every
    /// parameter leaf reachable from it.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        ensure!(
            loss_value.is_scalar(),
            Error::NonScalarLoss(loss_value.shape())
        );
        let mut grads: Vec<Option<Grid>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Grid::scalar(1.0));

        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if let Some(name) = &node.param {
                out.0.insert(name.clone(), grad);
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert!(
                    g.same_shape(&self.nodes[p].value),
                    "gradient shape {:?} != value shape {:?}",
                    g.shape(),
                    self.nodes[p].value.shape()
                );
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::gradients`] and accumulates the result into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads)
    }
}
