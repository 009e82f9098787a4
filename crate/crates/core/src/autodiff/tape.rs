use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::ops::Op;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Wengert list of executed primitives.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves of a tape, indexed by the leaf's [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. The tensor's `requires_grad` flag decides whether a
    /// gradient is produced for it.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    /// Records a copy of `param` as a leaf.
    pub fn param(&mut self, param: &Tensor<T>) -> Var {
        let mut value = Tensor::new(param.shape().to_vec(), param.data().to_vec())
            .expect("parameter shape is consistent");
        value.requires_grad = param.requires_grad;
        self.push(value, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].value.requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        assert!(!self.consumed, "tape reused after backward; start a new tape");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of an op; the output requires a gradient when any
    /// of `inputs` does.
    pub(crate) fn record(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut value = Tensor::new(shape, data).expect("op produced consistent shape");
        value.requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        self.push(value, op)
    }

    /// Runs the reverse sweep from a scalar `loss`, returns the leaf
    /// gradients and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice without a new forward pass".into(),
            ));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            node.op.backward(&self.nodes, &node.value, &g, &mut grads);
        }
        // Only leaves keep their gradient.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(Gradients { grads })
    }
}

/// Accumulates into the gradient slot of `input`, allocating zeros on first
/// touch. Inputs that do not require gradients are skipped.
pub(crate) fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    input: Var,
    f: impl FnOnce(&mut [T]),
) {
    let node = &nodes[input.0];
    if !node.value.requires_grad {
        return;
    }
    let slot = grads[input.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
    f(slot);
}
