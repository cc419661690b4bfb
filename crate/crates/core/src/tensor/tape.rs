//! Reverse-mode differentiation by operation recording.
//!
//! Every op appends a node holding its output value, its input node ids and
//! a [`Backward`] rule. Nodes are only ever appended, so insertion order is a
//! topological order and `backward` simply walks it in reverse.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded op.
pub trait Backward<T: Float> {
    /// Returns one gradient buffer per input (same length as that input), or
    /// `None` where `needs[i]` is false or the input gets no gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Float> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    name: Option<String>,
}

pub struct Tape<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    track_branches: bool,
    branch_signature: Cell<u64>,
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Float = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            track_branches: false,
            branch_signature: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    /// A tape whose non-smooth ops fold their discrete choices (relu signs,
    /// pooling argmaxes, clamps) into [`Tape::branch_signature`].
    pub fn with_branch_tracking() -> Self {
        Tape { track_branches: true, ..Self::new() }
    }

    pub fn tracks_branches(&self) -> bool {
        self.track_branches
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_signature.get()
    }

    /// Folds one discrete decision into the branch signature.
    pub fn note_branch(&self, decision: u64) {
        if self.track_branches {
            let d = decision.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let h = (self.branch_signature.get() ^ d).wrapping_mul(0x0100_0000_01b3);
            self.branch_signature.set(h.rotate_left(29));
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node { value, inputs: Vec::new(), rule: None, requires_grad: false, name: None })
    }

    /// Unnamed differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node { value, inputs: Vec::new(), rule: None, requires_grad: true, name: None })
    }

    /// Named differentiable parameter; its gradient is reported by name.
    pub fn param(&self, name: impl Into<String>, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node { value, inputs: Vec::new(), rule: None, requires_grad: true, name: Some(name.into()) })
    }

    /// Records an op computed outside the tape.
    pub fn record(&self, inputs: &[Var<'_, T>], value: Tensor<T>, rule: impl Backward<T> + 'static) -> Var<'_, T> {
        let nodes = self.nodes.borrow();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        drop(nodes);
        let rule: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(rule)) } else { None };
        self.push_node(Node { value, inputs: inputs.iter().map(|v| v.id).collect(), rule, requires_grad, name: None })
    }

    /// Gradients of a scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got shape {:?}", loss_node.value.shape())));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            let Some(rule) = &node.rule else {
                leaves.insert(id, Tensor::from_parts(node.value.shape().to_vec(), grad));
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = rule.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.len(), nodes[input].value.len());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut named = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let grad = leaves.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                named.insert(name.clone(), grad);
            }
        }
        Ok(Gradients { leaves, named })
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Float = f32> {
    leaves: BTreeMap<usize, Tensor<T>>,
    named: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient for a leaf; zeros when the leaf is not on any path to the loss.
    pub fn wrt(&self, leaf: Var<'_, T>) -> Tensor<T> {
        self.leaves.get(&leaf.id).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name)
    }

    /// Parameter name → gradient, for every named parameter on the tape.
    pub fn by_name(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.named
    }
}
