//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. `backward` walks the nodes in reverse order
//! of recording, so each node is visited only after all of its consumers
//! have contributed to its gradient.

use super::ops::Op;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

pub(super) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub needs_grad: bool,
    pub op: Op,
}

pub struct Tape {
    pub(super) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing is tracked for gradients (inference).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf; it is differentiated if it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs_grad = self.grad_enabled && t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), needs_grad, Op::Leaf)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub(super) fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad: needs_grad && self.grad_enabled,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Drops every node recorded after the first `len`; handles to dropped
    /// nodes become invalid. Clears gradients.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        if n.shape.is_empty() {
            return Tensor::scalar(n.value[0]);
        }
        Tensor::new(&n.shape, n.value.clone()).expect("recorded values are valid tensors")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f32> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Usage(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Populates gradients for every tracked value reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !node.needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                super::ops::backprop(&self.nodes, i, &g, &mut self.grads);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Zero-initialised gradient buffer for `v`, created on first touch.
pub(super) fn grad_buf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}
