//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operators append nodes and,
//! when any input needs a gradient, a boxed backward closure that routes the node's output
//! gradient to its inputs. [`Tape::backward`] walks nodes in reverse, so by the time a node's
//! closure runs its output gradient is complete (the tape is a DAG ordered by construction).
//!
//! Parameters are *leased*: each training step copies parameter tensors onto a fresh tape as
//! differentiable leaves, reads gradients back out, and drops the tape. No graph state survives
//! between steps, which keeps resume-from-checkpoint exact.

use super::{round_slice, Precision};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&[f64], &mut Grads)>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    back: Option<BackFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    /// Tape in the process-default precision (F32 unless overridden for verification).
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), precision: super::default_precision() }
    }

    pub fn with_precision(precision: Precision) -> Tape {
        Tape { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a node. Op implementations must pass `back: None` iff `needs_grad` is false.
    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        needs_grad: bool,
        back: Option<BackFn>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(back.is_none() || needs_grad, "backward closure on a non-grad node");
        round_slice(self.precision, &mut data);
        self.nodes.push(Node { shape, data, needs_grad, back });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a leased parameter): gradient is collected for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, None)
    }

    /// Non-differentiable input: data, frozen parameters, targets.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, None)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data, false, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], false, None)
    }

    /// Leases a tensor: differentiable leaf when `trainable && t.requires_grad`, else constant.
    pub fn lease(&mut self, t: &Tensor, trainable: bool) -> Var {
        if trainable && t.requires_grad {
            self.leaf(t)
        } else {
            self.constant(t)
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn item(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].data.clone()).expect("node is consistent")
    }

    /// Reverse accumulation from a scalar loss. Returns per-node gradients; leaves that the
    /// loss does not depend on have no entry (their gradient is exactly absent, not just zero).
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads = Grads { slots: vec![None; loss.0 + 1] };
        grads.slot(loss, 1)[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if grads.slots[i].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[i].back {
                let g = grads.slots[i].clone().expect("checked above");
                back(&g, &mut grads);
            }
        }
        Ok(grads)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    fn slot(&mut self, v: Var, len: usize) -> &mut Vec<f64> {
        self.slots[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Accumulates a dense contribution into `v`'s gradient.
    pub fn add(&mut self, v: Var, contribution: &[f64]) {
        let slot = self.slot(v, contribution.len());
        debug_assert_eq!(slot.len(), contribution.len());
        for (s, c) in slot.iter_mut().zip(contribution) {
            *s += c;
        }
    }

    /// Accumulates into a single element (scatter-style backward passes).
    pub fn add_at(&mut self, v: Var, len: usize, idx: usize, value: f64) {
        self.slot(v, len)[idx] += value;
    }

    /// Accumulates via a writer that sees the (zero-initialized) gradient buffer directly.
    pub fn add_with(&mut self, v: Var, len: usize, write: impl FnOnce(&mut [f64])) {
        write(self.slot(v, len));
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}
