//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; nodes are created after
//! their inputs so the tape is always in topological order. [`Tape::backward`]
//! walks it once in reverse, accumulating gradients into every node that
//! requires them. A tape lives for one forward/backward pass.

mod gradcheck;
mod ops;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use ops::BatchStats;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation, with whatever forward state backward needs.
#[derive(Debug, Clone)]
pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + y` where `y`'s shape is a suffix of `x`'s.
    AddBroadcast(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    TransposeLast2(Var),
    MeanTime(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<S> },
    PairwiseDistance { x: Var, y: Var, p: S },
    SelectRows { x: Var, rows: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<S> },
    BceWithLogits { logits: Var, targets: Vec<S>, weights: Vec<S> },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBroadcast(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x, _) | Sum(x) | Mean(x) | Relu(x) | Sigmoid(x) | Softmax(x) => vec![*x],
            TransposeLast2(x) | MeanTime(x) => vec![*x],
            Linear { x, w, b } | Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            BatchNormTrain { x, gamma, beta, .. } | BatchNormEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            PairwiseDistance { x, y, .. } => vec![*x, *y],
            SelectRows { x, .. } | L2NormalizeRows { x, .. } => vec![*x],
            BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Recorded computation graph plus the gradients of its last backward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        self.grad(v).map(|g| Tensor::from_vec(self.shape(v), g.to_vec()))
    }

    /// Attention probabilities `[B, heads, T, T]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients from several uses of one value are summed. Calling backward
    /// again discards the previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                let (head, _) = self.nodes.split_at(i + 1);
                let op = &head[i].op;
                let mut sink = GradSink { nodes: head, grads: &mut self.grads };
                ops::backward(op, &head[i].value, &g, &mut sink);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Split borrow of a tape used while propagating one node's gradient.
pub(crate) struct GradSink<'a, S> {
    nodes: &'a [Node<S>],
    grads: &'a mut [Option<Vec<S>>],
}

impl<'a, S: Scalar> GradSink<'a, S> {
    pub(crate) fn value(&self, v: Var) -> &'a Tensor<S> {
        &self.nodes[v.0].value
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds `delta` into the gradient of `v` when it wants one.
    pub(crate) fn accumulate(&mut self, v: Var, delta: &[S]) {
        if let Some(g) = self.slot(v) {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
    }

    /// Gradient buffer of `v`, zero-initialised on first use; `None` when
    /// `v` does not require a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut Vec<S>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }
}

#[cfg(test)]
mod tests;
