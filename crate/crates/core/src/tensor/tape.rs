//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns an arena of nodes, each holding the forward value of one
//! tensor plus the operation that produced it. [`Tensor`] is a cheap handle
//! into that arena. Calling [`Tape::backward`] on a scalar loss replays the
//! recorded operations in reverse and accumulates gradients additively into
//! every node that is reachable from a `requires_grad` leaf.

use thiserror::Error;

use super::real::Real;

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn new(id: usize, shape: Vec<usize>) -> Self {
        Tensor { id, shape }
    }
}

/// Errors raised by tensor construction, primitives, and backward passes.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },
    #[error("backward called twice without reset_grads")]
    BackwardTwice,
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("finite-difference step must be positive and finite, got {h}")]
    BadStep { h: f64 },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// How a scalar loss reduces over the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Recorded primitive. Input fields are node ids; `saved` buffers hold
/// forward intermediates the backward pass needs.
#[derive(Debug)]
pub(crate) enum Op<F: Real> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: F,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Flatten {
        a: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2x2 {
        a: usize,
        /// Flat input index of each pooled maximum.
        argmax: Vec<u32>,
    },
    LogSoftmax {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        reduction: Reduction,
        /// Row-softmax probabilities.
        probs: Vec<F>,
    },
    KlDivLogits {
        p: usize,
        q: usize,
        reduction: Reduction,
        log_p: Vec<F>,
        log_q: Vec<F>,
        row_kl: Vec<F>,
    },
    CwMargin {
        logits: usize,
        labels: Vec<usize>,
        reduction: Reduction,
        /// Index of the best non-label logit per row.
        best: Vec<u32>,
    },
}

pub(crate) struct Node<F: Real> {
    pub value: Vec<F>,
    pub shape: Vec<usize>,
    pub needs_grad: bool,
    pub op: Op<F>,
}

/// Arena of recorded operations, in topological order by construction.
pub struct Tape<F: Real> {
    pub(crate) nodes: Vec<Node<F>>,
    pub(crate) grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Register a leaf tensor. Gradients flow into it only when
    /// `requires_grad` is set.
    pub fn leaf(
        &mut self,
        data: Vec<F>,
        shape: &[usize],
        requires_grad: bool,
    ) -> TensorResult<Tensor> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                op: "leaf",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: Vec<F>, shape: &[usize]) -> TensorResult<Tensor> {
        self.leaf(data, shape, false)
    }

    pub(crate) fn push(
        &mut self,
        value: Vec<F>,
        shape: Vec<usize>,
        needs_grad: bool,
        op: Op<F>,
    ) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            shape: shape.clone(),
            needs_grad,
            op,
        });
        self.grads.push(None);
        Tensor::new(id, shape)
    }

    /// Forward value of a tensor.
    pub fn value(&self, t: &Tensor) -> &[F] {
        &self.nodes[t.id].value
    }

    /// Value of a scalar (shape `[1]`) tensor.
    pub fn scalar(&self, t: &Tensor) -> F {
        debug_assert_eq!(t.len(), 1);
        self.nodes[t.id].value[0]
    }

    /// Gradient accumulated by the last backward pass, if any reached `t`.
    pub fn grad(&self, t: &Tensor) -> Option<&[F]> {
        self.grads[t.id].as_deref()
    }

    pub fn requires_grad(&self, t: &Tensor) -> bool {
        matches!(self.nodes[t.id].op, Op::Leaf) && self.nodes[t.id].needs_grad
    }

    /// Clear all gradients so another backward pass may run.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    pub(crate) fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Add `delta` into the gradient slot of `id`, taking ownership of the
    /// buffer when the slot is empty.
    pub(crate) fn accumulate(&mut self, id: usize, delta: Vec<F>) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi = *gi + *di;
                }
                F::pool().give(delta);
            }
            None => self.grads[id] = Some(delta),
        }
    }

    /// Like [`Self::accumulate`] but clones from a borrowed buffer.
    pub(crate) fn accumulate_ref(&mut self, id: usize, delta: &[F]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => {
                let mut v = F::pool().scratch(delta.len());
                v.copy_from_slice(delta);
                self.grads[id] = Some(v);
            }
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// `requires_grad` leaf reachable from `loss`; gradients from multiple
    /// uses of the same tensor accumulate additively.
    pub fn backward(&mut self, loss: &Tensor) -> TensorResult<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                got: loss.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.grads[loss.id] = Some(vec![F::one()]);
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].needs_grad || self.grads[id].is_none() {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }
}

impl<F: Real> Drop for Tape<F> {
    fn drop(&mut self) {
        let pool = F::pool();
        for n in self.nodes.drain(..) {
            pool.give(n.value);
        }
        for g in self.grads.drain(..).flatten() {
            pool.give(g);
        }
    }
}
