//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends one node holding its output value,
//! the ids of its inputs, and a closure mapping the output gradient to input
//! gradients. Node ids are assigned in creation order, so reverse id order is
//! a reverse topological order of the graph.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Inputs available to a backward closure.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    /// Whether input `i` needs a gradient; closures may skip work when false.
    pub needs: &'a [bool],
    /// Guided-backpropagation gating for ReLU nodes.
    pub guided: bool,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Records a computation for a single backward sweep.
///
/// Leaf gradients persist on the tape and accumulate across repeated
/// [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    retained: RefCell<HashSet<usize>>,
    guided: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}({} {:?})", self.id, node.op, node.value.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push("leaf", value, Vec::new(), requires_grad, None)
    }

    /// Adds a tensor that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Accumulated gradient of a leaf or retained node after [`Tape::backward`].
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    /// Keeps the gradient of an intermediate node after the backward sweep.
    pub fn retain_grad(&self, var: Var<'_>) {
        self.retained.borrow_mut().insert(var.id);
    }

    /// Clears all stored gradients.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    /// Switches ReLU backward to the guided rule: gradient passes only where
    /// both the forward input and the upstream gradient are positive.
    pub fn set_guided_relu(&self, guided: bool) {
        self.guided.set(guided);
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        ensure!(
            root.value.numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            root.value.shape()
        );
        if !root.requires_grad {
            return Ok(());
        }
        let retained = self.retained.borrow();
        let mut persistent = self.grads.borrow_mut();
        if persistent.len() < nodes.len() {
            persistent.resize_with(nodes.len(), || None);
        }
        let guided = self.guided.get();
        let mut local: Vec<Option<Tensor>> = Vec::new();
        local.resize_with(loss.id + 1, || None);
        local[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = local[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.parents.is_empty() || retained.contains(&id) {
                accumulate(&mut persistent[id], &grad);
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let inputs: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let parent_grads = backward(&BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
                guided,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for ((&parent, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if let (true, Some(g)) = (*need, g) {
                    debug_assert_eq!(g.shape(), nodes[parent].value.shape(), "op {}", node.op);
                    accumulate(&mut local[parent], &g);
                }
            }
        }
        Ok(())
    }

    /// Appends an operation node. The backward closure is dropped when no
    /// input requires a gradient.
    pub(crate) fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let backward: Option<BackwardFn> = requires_grad.then(|| Box::new(backward) as BackwardFn);
        self.push(
            op,
            value,
            parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward,
        )
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents,
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: &Tensor) {
    match slot {
        Some(existing) => existing.add_assign(grad),
        None => *slot = Some(grad.clone()),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}
