//! Graph construction.
//!
//! A [`Graph`] is an append-only list of primitive nodes. Node ids are
//! handed out in insertion order, so the node list is always a valid
//! topological order. Shapes are static and checked when a node is added.

use std::collections::{BTreeMap, HashMap};

use crate::error::{GraphError, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Input(String),
    Param(String),
    Const(Tensor<T>),
    Add,
    Sub,
    Mul,
    Neg,
    Scale(T),
    AddConst(T),
    Square,
    Sqrt,
    /// `0.5 / sqrt(x)`, zero for `x <= 0`; derivative of [`Op::Sqrt`].
    HalfRecipSqrt,
    Recip,
    Exp,
    Log,
    Sigmoid,
    LeakyRelu(T),
    MaxConst(T),
    MinConst(T),
    /// Piecewise-constant indicator used for derivatives of kinked ops.
    Step {
        threshold: T,
        below: T,
        at: T,
        above: T,
    },
    MatMul,
    Transpose,
    SumAll,
    SumRows,
    SumCols,
    BroadcastScalar,
    BroadcastRows(usize),
    BroadcastCols(usize),
    Reshape,
    ConcatCols,
    SliceCols {
        start: usize,
        len: usize,
    },
    PadCols {
        left: usize,
        right: usize,
    },
    /// Row-wise `exp(-d) / sum exp(-d)` over the last axis.
    Softmin,
    StopGradient,
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::HalfRecipSqrt => "half_recip_sqrt",
            Op::Recip => "recip",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::MaxConst(_) => "max_const",
            Op::MinConst(_) => "min_const",
            Op::Step { .. } => "step",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::SumAll => "sum_all",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastScalar => "broadcast_scalar",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Reshape => "reshape",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::Softmin => "softmin",
            Op::StopGradient => "stop_gradient",
        }
    }

    pub(crate) fn is_leaf(&self) -> bool {
        matches!(self, Op::Input(_) | Op::Param(_) | Op::Const(_))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) shape: Vec<usize>,
}

/// Computation graph over tensors of scalar type `T`.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) leaves: HashMap<String, NodeId>,
    pub(crate) outputs: BTreeMap<String, NodeId>,
    pub(crate) grad_cache: HashMap<NodeId, Vec<(String, NodeId)>>,
}

fn mismatch(op: &'static str, detail: String) -> GraphError {
    GraphError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            outputs: BTreeMap::new(),
            grad_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub(crate) fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id.0))
    }

    fn leaf(&mut self, name: &str, shape: &[usize], is_param: bool) -> Result<NodeId> {
        if shape.contains(&0) {
            return Err(GraphError::InvalidShape(shape.to_vec()));
        }
        if let Some(&id) = self.leaves.get(name) {
            let node = &self.nodes[id.0];
            let same_kind = matches!((&node.op, is_param), (Op::Param(_), true) | (Op::Input(_), false));
            if node.shape != shape || !same_kind {
                return Err(GraphError::Redeclared {
                    name: name.to_string(),
                    expected: node.shape.clone(),
                    got: shape.to_vec(),
                });
            }
            return Ok(id);
        }
        let op = if is_param {
            Op::Param(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        let id = self.push(op, Vec::new(), shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares (or looks up) a named input leaf. Inputs receive no gradients
    /// from [`Graph::backward`].
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, false)
    }

    /// Declares (or looks up) a named trainable parameter leaf.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), Vec::new(), shape)
    }

    pub fn scalar_const(&mut self, value: T) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Names of all parameter leaves, sorted.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect();
        names.sort();
        names
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Registers `id` as a named output evaluated by [`Graph::forward`].
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn same_shape(&mut self, op: Op<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.shape.clone(), self.check(b)?.shape.clone());
        if sa != sb {
            return Err(mismatch(op.name(), format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(op, vec![a, b], sa))
    }

    fn unary(&mut self, op: Op<T>, a: NodeId) -> Result<NodeId> {
        let shape = self.check(a)?.shape.clone();
        Ok(self.push(op, vec![a], shape))
    }

    fn matrix_dims(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let s = &self.check(a)?.shape;
        if s.len() != 2 {
            return Err(mismatch(op, format!("expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Mul, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.unary(Op::Scale(c), a)
    }

    pub fn add_const(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.unary(Op::AddConst(c), a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, a)
    }

    pub(crate) fn half_recip_sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::HalfRecipSqrt, a)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Recip, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::LeakyRelu(T::zero()), a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: T) -> Result<NodeId> {
        self.unary(Op::LeakyRelu(alpha), a)
    }

    /// `max(a, c)` elementwise; the derivative is 0 at `a == c`.
    pub fn max_const(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.unary(Op::MaxConst(c), a)
    }

    /// `min(a, c)` elementwise; the derivative is 0 at `a == c`.
    pub fn min_const(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.unary(Op::MinConst(c), a)
    }

    pub(crate) fn step(&mut self, a: NodeId, threshold: T, below: T, at: T, above: T) -> Result<NodeId> {
        self.unary(
            Op::Step {
                threshold,
                below,
                at,
                above,
            },
            a,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![m, n]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        Ok(self.push(Op::Transpose, vec![a], vec![c, r]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::SumAll, vec![a], Vec::new()))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = numel(&self.check(a)?.shape);
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `[rows, cols] -> [cols]`, summing over rows.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = self.matrix_dims("sum_rows", a)?;
        Ok(self.push(Op::SumRows, vec![a], vec![c]))
    }

    /// `[rows, cols] -> [rows]`, summing over columns.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, _) = self.matrix_dims("sum_cols", a)?;
        Ok(self.push(Op::SumCols, vec![a], vec![r]))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = &self.check(a)?.shape;
        if !s.is_empty() {
            return Err(mismatch("broadcast_scalar", format!("expected rank 0, got {s:?}")));
        }
        Ok(self.push(Op::BroadcastScalar, vec![a], shape.to_vec()))
    }

    /// `[cols] -> [rows, cols]`, repeating the vector on every row.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        if s.len() != 1 {
            return Err(mismatch("broadcast_rows", format!("expected rank 1, got {s:?}")));
        }
        Ok(self.push(Op::BroadcastRows(rows), vec![a], vec![rows, s[0]]))
    }

    /// `[rows] -> [rows, cols]`, repeating each entry along its row.
    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        if s.len() != 1 {
            return Err(mismatch("broadcast_cols", format!("expected rank 1, got {s:?}")));
        }
        Ok(self.push(Op::BroadcastCols(cols), vec![a], vec![s[0], cols]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = &self.check(a)?.shape;
        if numel(s) != numel(shape) || shape.contains(&0) {
            return Err(mismatch("reshape", format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape, vec![a], shape.to_vec()))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.matrix_dims("concat_cols", a)?;
        let (rb, cb) = self.matrix_dims("concat_cols", b)?;
        if ra != rb {
            return Err(mismatch("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        Ok(self.push(Op::ConcatCols, vec![a, b], vec![ra, ca + cb]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > c {
            return Err(mismatch(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        Ok(self.push(Op::SliceCols { start, len }, vec![a], vec![r, len]))
    }

    pub(crate) fn pad_cols(&mut self, a: NodeId, left: usize, right: usize) -> Result<NodeId> {
        let (r, c) = self.matrix_dims("pad_cols", a)?;
        Ok(self.push(Op::PadCols { left, right }, vec![a], vec![r, left + c + right]))
    }

    /// Row-wise softmin weights `exp(-d_k) / sum_j exp(-d_j)` of a `[rows, k]`
    /// matrix, computed with the row minimum subtracted first.
    pub fn softmin(&mut self, a: NodeId) -> Result<NodeId> {
        self.matrix_dims("softmin", a)?;
        self.unary(Op::Softmin, a)
    }

    /// Identity in the forward pass; blocks gradient propagation.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::StopGradient, a)
    }

    /// Column `k` of a `[rows, cols]` matrix as a `[rows]` vector.
    pub fn column(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let s = self.slice_cols(a, k, 1)?;
        let rows = self.shape(a)[0];
        self.reshape(s, &[rows])
    }

    /// Squared Euclidean norm of every row of a `[rows, cols]` matrix.
    pub fn row_sq_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.square(a)?;
        self.sum_cols(sq)
    }

    /// `x W + b` with `x: [rows, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(x)[0];
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }
}
