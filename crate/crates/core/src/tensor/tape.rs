use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Everything a backward rule may look at.
pub(crate) struct BackwardCtx<'a, T: Scalar> {
    pub grad_out: &'a [T],
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each input needs a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// Returns one optional gradient per input, in input order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// A tape is single-threaded; use one per training thread.
pub struct Tape<T: Scalar = f32> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `tensor`; it receives a gradient iff it requires one.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let mut value = tensor.clone();
        value.zero_grad();
        let requires_grad = value.requires_grad();
        self.push(value, Vec::new(), None, requires_grad)
    }

    /// Records an owned value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut value = tensor;
        value.zero_grad();
        value.set_requires_grad(false);
        self.push(value, Vec::new(), None, false)
    }

    /// Records an owned value with an explicit gradient flag.
    pub fn input(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let mut value = tensor;
        value.zero_grad();
        value.set_requires_grad(requires_grad);
        self.push(value, Vec::new(), None, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        self.check(var).expect("variable from another tape");
        &self.nodes[var.index].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    pub(crate) fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Usage("variable was not recorded on this tape".into()));
        }
        Ok(())
    }

    pub(crate) fn record(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.index].requires_grad);
        let parents = parents.iter().map(|p| p.index).collect();
        if requires_grad {
            self.push(value, parents, Some(backward), true)
        } else {
            self.push(value, parents, None, false)
        }
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Leaves that require gradients get the sum of all contributions reaching
    /// them. Intermediate gradients are released as soon as they are consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.index].value;
        if loss_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.index].requires_grad {
            return Ok(Gradients { tape: self.id, grads });
        }
        grads[loss.index] = Some(vec![T::one()]);

        for index in (0..=loss.index).rev() {
            let node = &self.nodes[index];
            let Some(rule) = &node.backward else { continue };
            let Some(grad_out) = grads[index].take() else { continue };
            let ctx = BackwardCtx {
                grad_out: &grad_out,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = rule(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&parent, g) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                let Some(g) = g else { continue };
                debug_assert_eq!(g.len(), self.nodes[parent].value.numel());
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    tape: usize,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<T> {
        self.get(var).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}
