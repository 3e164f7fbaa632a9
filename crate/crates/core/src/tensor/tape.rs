//! Eager reverse-mode differentiation over a recorded tape.
//!
//! Values are computed immediately when an operation is recorded, so
//! data-dependent choices (sort orders, argmaxes, neighbor sets) are fixed at
//! record time and captured by the node's backward closure. The backward pass
//! walks nodes in reverse creation order, which is a valid topological order
//! by construction.

use std::cell::RefCell;

use crate::error::{Error, Result};

use super::Tensor;

pub(crate) type GradFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

pub(crate) struct Node {
    pub value: Tensor,
    pub parents: Vec<usize>,
    /// Given the gradient of the root w.r.t. this node, produce the gradient
    /// contributions for each parent (aligned with `parents`). Leaves: None.
    pub grad_fn: Option<GradFn>,
}

/// Records operations for one forward/backward pass. Single-threaded; run
/// independent tapes on independent threads.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node. Copyable; tied to the tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Introduce an input tensor as a leaf node.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
        })
    }

    pub(crate) fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(node);
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; nodes the
    /// root does not depend on have no gradient.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar root, got shape {:?}",
                root_node.value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::scalar(1.0)?);
        for id in (0..=root.id).rev() {
            let Some(grad_out) = grads[id].clone() else {
                continue;
            };
            let node = &nodes[id];
            let Some(grad_fn) = &node.grad_fn else {
                continue;
            };
            let parent_grads = grad_fn(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, g) in node.parents.iter().zip(parent_grads) {
                match &mut grads[pid] {
                    Some(acc) => {
                        let mut data = acc.data().to_vec();
                        super::add_assign(&mut data, g.data());
                        *acc = Tensor::new(acc.dims().to_vec(), data)?;
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass, indexed by the `Var`s of the originating tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.dims().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }
}
