use std::cell::{Cell, RefCell};
use std::fmt;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Backward rule: receives the output gradient and a per-input "needs grad"
/// mask, returns one optional gradient buffer per input.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    shape: Vec<usize>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Define-by-run recording of differentiable operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// A tape supports exactly one backward pass; the recorded closures are
/// released as they run.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let id = self.push(Node {
            shape: value.shape().to_vec(),
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id,
            value,
            requires_grad,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records the result of an op. The backward closure is only kept when
    /// some input participates in differentiation.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<T>,
        inputs: &[&Var<'t, T>],
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        for v in inputs {
            debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
        }
        let id = self.push(Node {
            shape: value.shape().to_vec(),
            requires_grad,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id,
            value,
            requires_grad,
        }
    }

    fn backward_from(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::State("backward() already ran on this tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut leaf_mask = vec![false; n];
        for (i, node) in nodes.iter().enumerate() {
            leaf_mask[i] = node.inputs.is_empty() && node.requires_grad;
        }
        if loss.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for i in (0..=loss.id).rev() {
            let node = &mut nodes[i];
            let Some(backward) = node.backward.take() else {
                continue;
            };
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let inputs = std::mem::take(&mut node.inputs);
            let needs: Vec<bool> = inputs.iter().map(|&j| grads_needed(&nodes, j)).collect();
            let input_grads = backward(&grad_out, &needs);
            debug_assert_eq!(input_grads.len(), inputs.len());
            for ((&j, g), need) in inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.len(), nodes[j].shape.iter().product::<usize>());
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        nodes.clear();
        for (i, g) in grads.iter_mut().enumerate() {
            if !leaf_mask[i] {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes,
            leaf_mask,
        })
    }
}

fn grads_needed<T: Real>(nodes: &[Node<T>], j: usize) -> bool {
    nodes[j].requires_grad
}

/// A tensor value recorded on a tape.
#[derive(Clone)]
pub struct Var<'t, T: Real = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.value.rank()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Runs reverse-mode differentiation from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        self.tape.backward_from(self)
    }
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

/// Gradients of requires-grad leaves after a backward pass.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    leaf_mask: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf; `None` when the leaf does not require grad.
    /// Leaves unreachable from the loss get an all-zero gradient.
    pub fn get(&self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        self.get_by_id(var.id)
    }

    pub(crate) fn get_by_id(&self, id: usize) -> Option<Tensor<T>> {
        if !*self.leaf_mask.get(id)? {
            return None;
        }
        let shape = self.shapes[id].clone();
        let data = match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![T::zero(); shape.iter().product()],
        };
        Some(Tensor::from_parts(shape, data))
    }

    /// Takes ownership of a leaf gradient buffer, zero-filled if unreachable.
    pub(crate) fn take_by_id(&mut self, id: usize) -> Option<Vec<T>> {
        if !*self.leaf_mask.get(id)? {
            return None;
        }
        Some(
            self.grads[id]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.shapes[id].iter().product()]),
        )
    }
}
