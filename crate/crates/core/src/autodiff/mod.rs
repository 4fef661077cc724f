//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node whose
//! inputs precede it. [`Tape::backward`] walks the nodes in exact reverse
//! order, accumulating gradients, and hands back the gradients of every
//! leaf that asked for one. The tape is consumed by the backward pass.

mod backward;
mod ops;

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

pub use ops::ConvGeom;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnKind {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    pub fn at(&self, o: usize, j: usize, i: usize) -> usize {
        (o * self.len + j) * self.inner + i
    }
}

pub(crate) enum Op<F> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: F,
    },
    Unary {
        kind: UnKind,
        a: Var,
    },
    Softmax {
        a: Var,
        split: AxisSplit,
    },
    LogSoftmax {
        a: Var,
        split: AxisSplit,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Gather {
        a: Var,
        idx: Arc<Vec<usize>>,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    L2NormRows {
        a: Var,
        eps: F,
        norms: Vec<F>,
    },
    /// Standardizes along `split.len`; saved 1/σ per normalized group.
    Standardize {
        a: Var,
        split: AxisSplit,
        inv_std: Vec<F>,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        factor: usize,
    },
    BceMean {
        x: Var,
        target: Arc<Vec<F>>,
    },
}

impl<F> Op<F> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale { a, .. }
            | Op::Unary { a, .. }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Gather { a, .. }
            | Op::Reshape { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::L2NormRows { a, .. }
            | Op::Standardize { a, .. } => vec![*a],
            Op::Upsample { x, .. } | Op::BceMean { x, .. } => vec![*x],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary { kind: BinKind::Add, .. } => "add",
            Op::Binary { kind: BinKind::Sub, .. } => "sub",
            Op::Binary { kind: BinKind::Mul, .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Unary { kind: UnKind::Relu, .. } => "relu",
            Op::Unary { kind: UnKind::Tanh, .. } => "tanh",
            Op::Unary { kind: UnKind::Sigmoid, .. } => "sigmoid",
            Op::Unary { kind: UnKind::Exp, .. } => "exp",
            Op::Unary { kind: UnKind::Log, .. } => "log",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2NormRows { .. } => "l2_normalize",
            Op::Standardize { .. } => "norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::BceMean { .. } => "bce_with_logits",
        }
    }
}

pub(crate) struct Node<F> {
    pub shape: Vec<usize>,
    pub value: Arc<Vec<F>>,
    pub op: Op<F>,
    pub requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
    param_leaves: HashMap<ParamId, Var>,
    kinks: DefaultHasher,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            kinks: DefaultHasher::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_leaves.clear();
        self.kinks = DefaultHasher::new();
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.push_arc(shape, Arc::new(value), op, requires_grad)
    }

    pub(crate) fn push_arc(
        &mut self,
        shape: Vec<usize>,
        value: Arc<Vec<F>>,
        op: Op<F>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mixes a piecewise-region signature into the kink log.
    pub(crate) fn note_kink(&mut self, tag: u8, bits: impl Iterator<Item = u8>) {
        tag.hash(&mut self.kinks);
        for b in bits {
            b.hash(&mut self.kinks);
        }
    }

    /// Signature of every piecewise branch taken so far (ReLU signs, norm
    /// floors). Two evaluations with different signatures straddle a kink.
    pub fn kink_signature(&self) -> u64 {
        self.kinks.finish()
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, false)
    }

    pub fn constant_vec(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf { param: None }, false))
    }

    /// Differentiable leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            t.requires_grad,
        );
        self.param_leaves.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.to_vec()).expect("node shape is consistent")
    }

    /// First node (in recording order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|v| !v.is_finite()))
            .map(|i| (i, self.nodes[i].op.name()))
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        backward::run(self, loss)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<F> {
    leaves: HashMap<Var, Vec<F>>,
    params: Vec<(ParamId, Vec<F>)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf, or `None` if nothing reached it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.leaves.get(&v).map(|g| g.as_slice())
    }

    pub fn params(&self) -> &[(ParamId, Vec<F>)] {
        &self.params
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for (id, g) in &self.params {
            store.add_grad(*id, g);
        }
    }
}
