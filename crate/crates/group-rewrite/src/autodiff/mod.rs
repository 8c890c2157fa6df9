//! Reverse-mode automatic differentiation on dense tensors, with the Adam
//! optimizer and warmup learning-rate schedules used by the trainers.
//!
//! The design is define-by-run: a [`Tape`] records one forward computation,
//! [`Tape::backward`] replays it in reverse and returns per-parameter
//! gradients. Parameters live outside the tape in a [`ParamStore`] so the
//! same weights can be reused across steps (and across worker threads, since
//! the store is only read during a forward pass).

mod ops;
mod optim;
mod schedule;
mod tensor;

#[cfg(test)]
mod tests;

pub use optim::{adam_step, clip_global_norm, AdamState};
pub use schedule::LrSchedule;
pub use tensor::{Scalar, Tensor};

use std::cell::RefCell;
use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter `{name}` has no accumulated gradient")]
    MissingGradient { name: String },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("learning-rate schedule is undefined at step 0")]
    ZeroStep,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named trainable tensors plus their accumulated gradients.
///
/// Gradients accumulate across [`ParamStore::accumulate`] calls until an
/// optimizer step (or [`ParamStore::clear_grads`]) resets them.
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Tensor<F>>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter under a unique name.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub(crate) fn take_grad(&mut self, id: ParamId) -> Option<Tensor<F>> {
        self.grads[id.0].take()
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor<F>> {
        self.grads[id.0].as_mut()
    }

    /// Adds a batch of gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (&slot, g) in &grads.by_param {
            match &mut self.grads[slot] {
                Some(acc) => acc.add_assign(g),
                none => *none = Some(g.clone()),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    /// Total number of scalar elements across all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Per-parameter gradients produced by one [`Tape::backward`] pass.
pub struct Gradients<F: Scalar> {
    by_param: HashMap<usize, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.get(&id.0)
    }

    /// Element-wise sum with another gradient set.
    pub fn add(&mut self, other: &Gradients<F>) {
        for (&slot, g) in &other.by_param {
            match self.by_param.get_mut(&slot) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_param.insert(slot, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        for g in self.by_param.values_mut() {
            g.scale_assign(c);
        }
    }
}

type BackFn<F> = Box<dyn Fn(&BackCtx<'_, F>) -> Vec<(usize, Tensor<F>)>>;

struct Node<F: Scalar> {
    value: Tensor<F>,
    needs_grad: bool,
    param: Option<usize>,
    backward: Option<BackFn<F>>,
}

/// Read-only view handed to backward closures.
pub(crate) struct BackCtx<'a, F: Scalar> {
    nodes: &'a [Node<F>],
    pub grad: &'a Tensor<F>,
    idx: usize,
}

impl<'a, F: Scalar> BackCtx<'a, F> {
    pub fn value(&self, idx: usize) -> &Tensor<F> {
        &self.nodes[idx].value
    }

    pub fn out(&self) -> &Tensor<F> {
        &self.nodes[self.idx].value
    }
}

/// Records one forward computation.
///
/// Creation order is a topological order of the graph, so the backward pass
/// is a single reverse sweep. A tape is single-threaded; use one per sample.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that records values only; backward closures are skipped, which
    /// makes repeated inference forwards cheaper.
    pub fn inference() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A leaf with no gradient flow.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push(Node { value, needs_grad: false, param: None, backward: None })
    }

    /// A leaf bound to a parameter; gradients reaching it are reported under
    /// the parameter's id.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(Node {
            value: store.value(id).clone(),
            needs_grad: self.grad_enabled,
            param: Some(id.0),
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, node: Node<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    pub(crate) fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor<F>) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub(crate) fn with_values<T>(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor<F>, &Tensor<F>) -> T,
    ) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor<F>,
        parents: &[Var],
        backward: impl Fn(&BackCtx<'_, F>) -> Vec<(usize, Tensor<F>)> + 'static,
    ) -> Var {
        let needs_grad = self.grad_enabled
            && parents.iter().any(|p| self.nodes.borrow()[p.0].needs_grad);
        let backward: Option<BackFn<F>> =
            if needs_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value, needs_grad, param: None, backward })
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// parameter the loss depends on; a loss with no parameter ancestry
    /// yields an empty set (all gradients zero).
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut by_param: HashMap<usize, Tensor<F>> = HashMap::new();
        if !loss_node.needs_grad {
            return Ok(Gradients { by_param });
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(slot) = node.param {
                match by_param.get_mut(&slot) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        by_param.insert(slot, g.clone());
                    }
                }
            }
            if let Some(back) = &node.backward {
                let ctx = BackCtx { nodes: &nodes, grad: &g, idx: i };
                for (p, contrib) in back(&ctx) {
                    debug_assert!(p < i, "backward edge must point to an earlier node");
                    if !nodes[p].needs_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Ok(Gradients { by_param })
    }
}
