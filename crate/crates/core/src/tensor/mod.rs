//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The engine is tape-based: every operation on a graph-attached tensor
//! appends a record to the active [`Tape`], and [`grad`](autograd::grad)
//! walks the tape backwards. Backward rules are themselves written in
//! terms of tensor operations, so a gradient computed with
//! `create_graph = true` is again differentiable — this is what the
//! gradient-penalty terms rely on.
//!
//! Tensors without a tape attachment are plain immutable values; the same
//! operations compute values only. A tape is rebuilt for every training
//! step and freed when the last tensor referencing it is dropped.

mod conv;
mod ops;
mod tape;

pub mod autograd;

pub use autograd::{finite_diff_check, grad};
pub use tape::Tape;

use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) use tape::{Node, Op};

/// Product of shape extents; the empty shape is a rank-0 scalar.
pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense tensor, optionally attached to a differentiation tape.
#[derive(Clone)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    node: Option<Node<E>>,
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, attached={}, requires_grad={})",
            self.shape,
            self.node.is_some(),
            self.requires_grad()
        )?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl<E: Scalar> Tensor<E> {
    /// Build a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel_of(shape), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor<E> {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::zero(); numel_of(shape)]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: E) -> Tensor<E> {
        assert!(value.is_finite(), "full() requires a finite fill value");
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel_of(shape)]),
            node: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Tensor<E> {
        Tensor::full(shape, E::one())
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: E) -> Tensor<E> {
        Tensor::full(&[], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.shape)
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.to_vec()
    }

    /// The single element of a scalar (numel-1) tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Whether this tensor is a node of a live tape.
    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Whether gradients flow to or through this tensor.
    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some(n) => n.tape.record_requires_grad(n.id),
            None => false,
        }
    }

    /// Same value with the tape attachment removed.
    pub fn detach(&self) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        self.data.clone()
    }

    pub(crate) fn node(&self) -> Option<&Node<E>> {
        self.node.as_ref()
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<E>>, node: Option<Node<E>>) -> Tensor<E> {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor { shape, data, node }
    }

    /// Tape this tensor is attached to, if any. Useful for watching
    /// further variables on the same graph, as gradient-penalty style
    /// objectives require.
    pub fn tape(&self) -> Option<Tape<E>> {
        self.node.as_ref().map(|n| n.tape.clone())
    }

    /// Resolve the common tape of a set of operands, checking that no two
    /// operands belong to different tapes.
    pub(crate) fn common_tape(operands: &[&Tensor<E>]) -> Result<Option<Tape<E>>> {
        let mut found: Option<Tape<E>> = None;
        for t in operands {
            if let Some(n) = &t.node {
                match &found {
                    None => found = Some(n.tape.clone()),
                    Some(existing) => {
                        if !Rc::ptr_eq(existing.inner(), n.tape.inner()) {
                            return Err(Error::InvalidArgument(
                                "operands belong to different tapes".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(found)
    }

    /// Finish an operation: validate finiteness, then either record the
    /// result on `tape` or return a detached value.
    pub(crate) fn finish_op(
        opname: &'static str,
        tape: Option<Tape<E>>,
        op_inputs: &[&Tensor<E>],
        make_op: impl FnOnce(&[usize]) -> Op<E>,
        shape: Vec<usize>,
        data: Vec<E>,
    ) -> Result<Tensor<E>> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        let data = Arc::new(data);
        match tape {
            None => Ok(Tensor {
                shape,
                data,
                node: None,
            }),
            Some(tape) => {
                // Operands not yet on the tape enter as constant leaves so
                // backward rules can reference them by id.
                let mut ids = Vec::with_capacity(op_inputs.len());
                for t in op_inputs {
                    let id = match &t.node {
                        Some(n) => n.id,
                        None => tape.push_leaf(t.shape.clone(), t.data.clone(), false),
                    };
                    ids.push(id);
                }
                let op = make_op(&ids);
                let id = tape.push_op(op, shape.clone(), data.clone());
                Ok(Tensor {
                    shape,
                    data,
                    node: Some(Node { tape, id }),
                })
            }
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}
