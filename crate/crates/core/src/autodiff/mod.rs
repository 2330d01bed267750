//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Nodes are appended to the tape in evaluation order, so walking the tape
//! backwards from the loss is a topological traversal that visits each node
//! once. Gradients accumulate across repeated [`Tape::backward`] calls until
//! [`Tape::zero_grad`] is called.

mod attention;
mod ops;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use attention::AttentionSpec;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Training mode enables dropout; evaluation mode makes every op deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Sum { a: Var },
    Mean { a: Var },
    Relu { a: Var },
    CausalMask { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embed { table: Var, indices: Vec<usize> },
    Dropout { a: Var, keep: Vec<bool>, scale: T },
    Concat { parts: Vec<Var> },
    SliceFeatures { a: Var, start: usize },
    SlicePositions { a: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    Attention(Box<attention::AttentionSaved<T>>),
}

pub(crate) struct Node<T> {
    pub value: Array<T>,
    pub grad: Option<Array<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Array<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Post-softmax, pre-dropout attention probabilities of a fused attention
    /// node, laid out `[batch, head, query, key]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], [usize; 4])> {
        match &self.nodes[v.0].op {
            Op::Attention(saved) => Some((&saved.probs, saved.probs_shape())),
            _ => None,
        }
    }

    pub(crate) fn push(&mut self, value: Array<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients are added to any
    /// gradients already present from earlier sweeps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(loss_node.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, lower);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, created zeroed on first use.
pub(crate) fn grad_slot<'a, T: Scalar>(
    grads: &'a mut [Option<Array<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Array<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Array::zeros(nodes[v.0].value.shape()));
    }
    slot.as_mut()
}
