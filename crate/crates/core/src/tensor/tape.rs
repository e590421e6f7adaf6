use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::{Mask, Real, Tensor};
use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

/// Recorded operation together with whatever the backward pass needs beyond
/// the input and output values already stored on the tape.
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { a: NodeId, scale: T },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Softmax { a: NodeId },
    Concat { parts: Vec<NodeId> },
    Narrow { a: NodeId, axis: usize, start: usize },
    Reshape { a: NodeId },
    MaskedFill { a: NodeId, mask: Arc<Mask> },
    Embedding { table: NodeId, ids: Vec<usize> },
    LayerNorm {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum { a: NodeId },
    Mean { a: NodeId },
    SoftmaxNll {
        logits: NodeId,
        targets: Vec<usize>,
        valid: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Dropout { a: NodeId, keep: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape { .. } => "reshape",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SoftmaxNll { .. } => "softmax_nll",
            Op::Dropout { .. } => "dropout",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Arc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is driven from a single thread. Records are stored in creation
/// order, so every record's inputs precede it. [`Tape::reset`] clears the
/// tape between training steps.
pub struct Tape<T: Real = f64> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    pub(crate) grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("records", &self.len()).finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every record. Requires that no [`Var`] borrowed from this tape is alive.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.grads.get_mut().clear();
    }

    /// Registers an input tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers an input without copying its data.
    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: NodeId) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Sequence of recorded operation names, oldest first.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f64> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: NodeId,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Gradient accumulated by the last [`Var::backward`] call.
    ///
    /// `None` for values that do not require a gradient; zeros for values the
    /// loss does not depend on.
    pub fn grad(&self) -> Option<Tensor<T>> {
        if !self.requires_grad() {
            return None;
        }
        let grads = self.tape.grads.borrow();
        match grads.get(self.id).and_then(|g| g.as_ref()) {
            Some(g) => Some(g.clone()),
            None => Some(Tensor::zeros(self.value().shape())),
        }
    }

    /// Reverse-mode sweep from this scalar.
    pub fn backward(&self) -> Result<()> {
        let value = self.value();
        if value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        super::backward::run(self.tape, self.id);
        Ok(())
    }
}
