//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes once in reverse order. Leaves are either constants,
//! differentiable inputs, or named parameters. Nodes that cannot reach a
//! differentiable leaf are skipped during the backward sweep, so an attack
//! that only needs input gradients never pays for weight gradients.

mod conv;
mod ops;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) use conv::ConvGeom;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Constant,
    Input,
    Param(String),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Pick {
        x: usize,
        index: Vec<usize>,
    },
    MaxOther {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    GradReverse(usize, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Single-writer; distinct tapes are independent.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Op::Constant, false)
    }

    /// Differentiable leaf, e.g. the image an attack perturbs.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Op::Input, true)
    }

    /// Named differentiable leaf; its gradient is reported by name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.leaf(value, Op::Param(name.into()), true)
    }

    fn leaf(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    fn var(&self, id: usize) -> Var {
        Var { id, tape: self.id }
    }

    pub(crate) fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub(crate) fn val(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = op.parents().iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    /// Hash of every data-dependent branch taken in the forward pass (relu
    /// masks, pooling and max-other winners). Two evaluations with equal
    /// signatures follow the same piecewise-smooth branch. The flag is set
    /// when some relu input sits exactly on its kink.
    pub fn branch_signature(&self) -> (u64, bool) {
        let mut h = DefaultHasher::new();
        let mut on_kink = false;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(p) => {
                    for v in self.nodes[*p].value.data() {
                        (*v > T::zero()).hash(&mut h);
                        on_kink |= *v == T::zero();
                    }
                }
                Op::MaxPool2d { argmax, .. } | Op::MaxOther { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        (h.finish(), on_kink)
    }

    /// Reverse sweep from a scalar node. Returns gradients for every
    /// differentiable leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        let root_value = &self.nodes[root].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarLoss(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(root_value.shape(), T::one()));
        let mut leaves = Vec::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Input | Op::Param(_) => leaves.push((id, g)),
                op => {
                    if node.needs_grad {
                        ops::backward_op(self, op, id, &g, &mut grads)?;
                    }
                }
            }
        }
        leaves.reverse();
        Ok(Gradients {
            tape: self.id,
            leaves,
            names: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match &n.op {
                    Op::Param(name) => Some((name.clone(), i)),
                    _ => None,
                })
                .collect(),
        })
    }
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Constant | Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Dense { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Reshape(a)
            | Op::GradReverse(a, _) => vec![*a],
            Op::MaxPool2d { x, .. } | Op::Pick { x, .. } | Op::MaxOther { x, .. } => vec![*x],
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T: Scalar> {
    tape: u64,
    leaves: Vec<(usize, Tensor<T>)>,
    names: Vec<(String, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient at a differentiable leaf, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.iter().find(|(id, _)| *id == v.id).map(|(_, g)| g)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        let (_, id) = self.names.iter().find(|(n, _)| n == name)?;
        self.leaves.iter().find(|(i, _)| i == id).map(|(_, g)| g)
    }

    /// Gradient for every named parameter registered on the tape, in
    /// registration order. Parameters the loss does not reach get `None`.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor<T>>)> {
        self.names.iter().map(|(name, id)| {
            let g = self.leaves.iter().find(|(i, _)| i == id).map(|(_, g)| g);
            (name.as_str(), g)
        })
    }
}
