//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to tracked [`Var`]s in
//! construction order, which is already a topological order. [`Graph::backward`]
//! walks the tape in exact reverse and hands each node's output gradient to
//! its backward rule.
//!
//! Untracked values (constants, or everything when the graph was built with
//! [`Graph::no_grad`]) never enter the tape, so inference keeps no saved
//! context and intermediate activations are freed as soon as their last
//! [`Var`] handle is dropped.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Backward rule: receives the output gradient and, per input, whether a
/// gradient is wanted. Returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    op: &'static str,
    inputs: Vec<Option<usize>>,
    value: Rc<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone)]
pub struct Var<T: Float = f32> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Float> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// True when the value participates in differentiation.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        self.value.clone()
    }

    /// Copies the value out of the graph.
    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

pub struct Graph<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    macs: Cell<u64>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            macs: Cell::new(0),
        }
    }

    /// A graph that records nothing; every produced `Var` is untracked.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op kinds on the tape, in execution order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// Multiply-accumulate count of all matmul/conv work executed so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn count_macs(&self, n: usize) {
        self.macs.set(self.macs.get() + n as u64);
    }

    /// Input leaf. Tracked when `requires_grad` and the graph records.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        let value = Rc::new(value);
        if !(self.grad_enabled && requires_grad) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: "leaf",
            inputs: Vec::new(),
            value: value.clone(),
            backward: None,
        });
        Var { id: Some(id), value }
    }

    /// Untracked input.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        inputs: &[&Var<T>],
        out: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        if cfg!(debug_assertions) && !out.all_finite() {
            let inputs_finite = inputs.iter().all(|v| v.value.all_finite());
            assert!(!inputs_finite, "{op} produced a non-finite value from finite inputs");
        }
        let value = Rc::new(out);
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            value: value.clone(),
            backward: Some(Box::new(backward)),
        });
        Var { id: Some(id), value }
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// The tape is left intact, so calling `backward` again yields the same
    /// gradients; accumulation across calls is the caller's business.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.value.shape().to_vec(), T::one()));
        for id in (0..=root).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(rule) = &node.backward {
                let needs: Vec<bool> = node.inputs.iter().map(|i| i.is_some()).collect();
                let in_grads = rule(&grad_out, &needs);
                debug_assert_eq!(in_grads.len(), node.inputs.len(), "{} backward arity", node.op);
                for (input, g) in node.inputs.iter().zip(in_grads) {
                    if let (Some(input), Some(g)) = (input, g) {
                        debug_assert_eq!(
                            g.shape(),
                            nodes[*input].value.shape(),
                            "{} produced a gradient of the wrong shape",
                            node.op
                        );
                        match &mut grads[*input] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            } else {
                // Only leaf gradients are kept.
                grads[id] = Some(grad_out);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`]: gradient per tracked node.
pub struct Gradients<T: Float = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss w.r.t. the leaf `var`; `None` when the loss does
    /// not depend on it, it was never tracked, or it is not a leaf.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.id.and_then(|id| self.grads.get_mut(id)?.take())
    }
}
