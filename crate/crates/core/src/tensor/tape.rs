//! The differentiation tape: an append-only record of executed operations.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

static TAPE_EPOCH: AtomicU64 = AtomicU64::new(0);

/// One recorded operation. Fields are node ids on the same tape; geometry
/// needed by the backward rule is stored inline.
#[derive(Clone, Debug)]
pub(crate) enum Op<E: Scalar> {
    /// Entry point: a watched variable or captured constant.
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Tanh(usize),
    AddConst(usize, E),
    MulConst(usize, E),
    LeakyRelu(usize, E),
    /// `[m,k] x [k,n]` matrix product.
    Matmul(usize, usize),
    Transpose(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Gradient of `Conv2d` w.r.t. its input; a first-class op so that it
    /// can itself be differentiated.
    ConvInputGrad {
        grad_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Gradient of `Conv2d` w.r.t. its kernel; also first-class.
    ConvKernelGrad {
        input: usize,
        grad_out: usize,
        stride: usize,
        pad: usize,
    },
    Upsample2x(usize),
    Avgpool2x(usize),
    /// Sum over `axes`, dropping them from the shape.
    SumAxes { input: usize, axes: Vec<usize> },
    /// Insert `axes` by repetition; the exact adjoint of `SumAxes`.
    BroadcastAxes { input: usize, axes: Vec<usize> },
    Reshape(usize),
    Concat { a: usize, b: usize, axis: usize },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
}

impl<E: Scalar> Op<E> {
    /// Ids of the operand nodes, in operand order.
    pub(crate) fn input_ids(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Matmul(a, b)
            | Op::Concat { a, b, .. } => vec![*a, *b],
            Op::Neg(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Tanh(a)
            | Op::AddConst(a, _)
            | Op::MulConst(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Transpose(a)
            | Op::Upsample2x(a)
            | Op::Avgpool2x(a)
            | Op::Reshape(a)
            | Op::SumAxes { input: a, .. }
            | Op::BroadcastAxes { input: a, .. }
            | Op::Slice { input: a, .. } => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ConvInputGrad { grad_out, kernel, .. } => vec![*grad_out, *kernel],
            Op::ConvKernelGrad { input, grad_out, .. } => vec![*input, *grad_out],
        }
    }
}

/// One node of the graph: the op that produced it, its value, and whether
/// any watched variable feeds it.
pub(crate) struct Record<E: Scalar> {
    pub(crate) op: Op<E>,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Arc<Vec<E>>,
    pub(crate) requires_grad: bool,
}

pub(crate) struct TapeInner<E: Scalar> {
    pub(crate) records: Vec<Record<E>>,
}

/// Tensor-to-tape attachment: which tape, and which node on it.
#[derive(Clone)]
pub(crate) struct Node<E: Scalar> {
    pub(crate) tape: Tape<E>,
    pub(crate) id: usize,
}

/// Handle to a differentiation tape. Clones share the same tape.
pub struct Tape<E: Scalar> {
    inner: Rc<RefCell<TapeInner<E>>>,
    epoch: u64,
}

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: self.inner.clone(),
            epoch: self.epoch,
        }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Tape<E> {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { records: Vec::new() })),
            epoch: TAPE_EPOCH.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// Monotonic id distinguishing tapes, for diagnostics.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attach a copy of `t` as a watched variable: gradients can be taken
    /// with respect to the returned tensor.
    pub fn watch(&self, t: &Tensor<E>) -> Tensor<E> {
        let id = self.push_leaf(t.shape().to_vec(), t.data_arc(), true);
        Tensor::from_parts(
            t.shape().to_vec(),
            t.data_arc(),
            Some(Node {
                tape: self.clone(),
                id,
            }),
        )
    }

    /// Attach a copy of `t` as a constant: it participates in the graph but
    /// receives no gradient.
    pub fn constant(&self, t: &Tensor<E>) -> Tensor<E> {
        let id = self.push_leaf(t.shape().to_vec(), t.data_arc(), false);
        Tensor::from_parts(
            t.shape().to_vec(),
            t.data_arc(),
            Some(Node {
                tape: self.clone(),
                id,
            }),
        )
    }

    pub(crate) fn inner(&self) -> &Rc<RefCell<TapeInner<E>>> {
        &self.inner
    }

    pub(crate) fn push_leaf(&self, shape: Vec<usize>, value: Arc<Vec<E>>, requires_grad: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.records.push(Record {
            op: Op::Leaf,
            shape,
            value,
            requires_grad,
        });
        inner.records.len() - 1
    }

    pub(crate) fn push_op(&self, op: Op<E>, shape: Vec<usize>, value: Arc<Vec<E>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = op
            .input_ids()
            .iter()
            .any(|&id| inner.records[id].requires_grad);
        inner.records.push(Record {
            op,
            shape,
            value,
            requires_grad,
        });
        inner.records.len() - 1
    }

    pub(crate) fn record_requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().records[id].requires_grad
    }

    /// Clone out everything backward needs for node `id` without holding
    /// the borrow (backward itself records new nodes when building a
    /// differentiable gradient).
    pub(crate) fn record_parts(&self, id: usize) -> (Op<E>, Vec<usize>, Arc<Vec<E>>, bool) {
        let inner = self.inner.borrow();
        let r = &inner.records[id];
        (r.op.clone(), r.shape.clone(), r.value.clone(), r.requires_grad)
    }

    /// Rebuild a tensor handle for node `id`. With `attach = false` the
    /// handle is detached, so operations on it record nothing.
    pub(crate) fn handle(&self, id: usize, attach: bool) -> Tensor<E> {
        let (shape, value) = {
            let inner = self.inner.borrow();
            let r = &inner.records[id];
            (r.shape.clone(), r.value.clone())
        };
        let node = attach.then(|| Node {
            tape: self.clone(),
            id,
        });
        Tensor::from_parts(shape, value, node)
    }

    #[cfg(test)]
    pub(crate) fn values_snapshot(&self) -> Vec<Vec<E>> {
        self.inner
            .borrow()
            .records
            .iter()
            .map(|r| r.value.to_vec())
            .collect()
    }
}
