//! Tape-based reverse-mode automatic differentiation.
//!
//! Every [`Tensor`] is a handle (tape reference + node index) into a shared
//! [`Tape`]. Recording an operation computes the forward value eagerly and
//! appends an op record; [`Tensor::backward`] replays the records in reverse
//! order, accumulating gradients as plain `Vec<f64>` buffers.
//!
//! Design notes:
//!
//! * All values are `f64`. Shapes are explicit `Vec<usize>` extents; a scalar
//!   is represented as shape `[1]`.
//! * Gradients are only propagated to nodes that (transitively) depend on a
//!   leaf created with `requires_grad = true`; everything else is skipped,
//!   which in particular avoids computing image-sized input gradients.
//! * Intermediate gradients are dropped as soon as their op has been
//!   processed, so peak memory during backward stays close to the forward
//!   tape size.
//! * A tape is intended to be short-lived: build a graph, call `backward`
//!   once, read the leaf gradients, drop the tape.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod ops;
mod sskernel;

pub use ops::{BlendTerm, CamTap, LiftTaps, SparseMap};

/// Errors produced by tensor construction and op recording.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    /// Two operands have incompatible shapes.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has the wrong shape for the op.
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    /// Operands were created on different tapes.
    #[error("{op}: operands live on different tapes")]
    TapeMismatch { op: &'static str },
    /// `backward` was called on a non-scalar tensor.
    #[error("backward requires a scalar (shape [1]), got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    /// Anything else (bad arguments, inconsistent maps, ...).
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f64>>,
    pub needs_grad: bool,
}

struct OpRecord {
    out: usize,
    op: ops::Op,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    nodes: Vec<Node>,
    records: Vec<OpRecord>,
}

/// A shared recording of forward operations.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes currently recorded (leaves + op outputs).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn add_node(&self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            data,
            shape,
            grad: None,
            needs_grad,
        });
        inner.nodes.len() - 1
    }

    /// Creates a differentiable leaf. Gradients accumulate on the node and can
    /// be read back with [`Tensor::grad`] after `backward`.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.make(data, shape, true)
    }

    /// Creates a non-differentiable value (inputs, targets, masks, ...).
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.make(data, shape, false)
    }

    /// Convenience: a non-differentiable scalar.
    pub fn scalar(&self, value: f64) -> Tensor {
        self.constant(vec![value], &[1]).expect("scalar is well-formed")
    }

    fn make(&self, data: Vec<f64>, shape: &[usize], needs_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!(
                    "shape {:?} does not describe {} elements",
                    shape,
                    data.len()
                ),
            });
        }
        let id = self.add_node(data, shape.to_vec(), needs_grad);
        Ok(Tensor {
            tape: self.clone(),
            id,
            shape: shape.to_vec(),
        })
    }

    pub(crate) fn push_op(
        &self,
        data: Vec<f64>,
        shape: Vec<usize>,
        needs_grad: bool,
        op: ops::Op,
    ) -> Tensor {
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                data,
                shape: shape.clone(),
                grad: None,
                needs_grad,
            });
            let id = inner.nodes.len() - 1;
            if needs_grad {
                inner.records.push(OpRecord { out: id, op });
            }
            id
        };
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }
}

/// A handle to one node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Borrows the forward value in place.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.tape.inner.borrow(), |inner| {
            inner.nodes[self.id].data.as_slice()
        })
    }

    /// Copies the forward value out of the tape.
    pub fn value(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data()[0]
    }

    /// Gradient accumulated by the last `backward` call, if this node received
    /// one (leaves with `requires_grad` that participated in the loss).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub(crate) fn check_same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch { op })
        }
    }

    /// Runs reverse-mode accumulation from this scalar.
    ///
    /// Gradients of intermediate nodes are freed as soon as they have been
    /// consumed; leaf gradients stay on their nodes for [`Tensor::grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.shape.clone()));
        }
        let mut inner = self.tape.inner.borrow_mut();
        let TapeInner { nodes, records } = &mut *inner;
        if !nodes[self.id].needs_grad {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "scalar does not depend on any differentiable leaf".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);
        for record in records.iter().rev() {
            // Taking the gradient frees it once this op has consumed it.
            let Some(gout) = grads[record.out].take() else {
                continue;
            };
            ops::backward_op(nodes, &record.op, &gout, &mut grads);
        }
        // Whatever is left belongs to leaves (no op produces them).
        for (id, slot) in grads.into_iter().enumerate() {
            if let Some(g) = slot {
                nodes[id].grad = Some(g);
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}
