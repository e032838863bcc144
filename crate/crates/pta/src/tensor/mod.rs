//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! Tensors are rank-1 or rank-2, row-major, and immutable once created.
//! Differentiable ops append nodes to a [`Graph`] tape; [`Tensor::backward`]
//! walks the tape in reverse creation order (which is a valid reverse
//! topological order, since parents always precede children) and visits each
//! node exactly once.

mod linalg;
mod params;

pub use params::{ParamGrads, ParamId, ParamStore};

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (size {size})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Contract-violation error with a free-form message.
pub fn contract_err(msg: impl Into<String>) -> TensorError {
    TensorError::Contract(msg.into())
}

use contract_err as contract;

pub type NodeId = usize;

/// Which axis of a rank-2 tensor an op works along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Row-broadcast bias add: x[m x n] + b[n].
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Relu {
        x: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: Axis,
    },
    StackRows {
        parts: Vec<NodeId>,
    },
    SelectRow {
        x: NodeId,
        row: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        width: usize,
    },
    Softmax {
        x: NodeId,
        axis: Axis,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
    /// Mask entries are 0 or 1/(1-p); applied elementwise.
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    SumAll {
        x: NodeId,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Append-only computation tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

#[derive(Clone)]
struct NodeRef {
    graph: Graph,
    id: NodeId,
}

/// Dense row-major tensor of `f64`, optionally attached to a computation graph.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape_data(shape: &[usize], data: &[f64]) {
    let numel: usize = shape.iter().product();
    assert_eq!(
        numel,
        data.len(),
        "shape {:?} does not match buffer length {}",
        shape,
        data.len()
    );
    assert!(
        !shape.is_empty() && shape.len() <= 2,
        "only rank-1 and rank-2 tensors are supported, got {shape:?}"
    );
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let value = Arc::new(value);
        inner.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: Arc::clone(&value),
            requires_grad,
        });
        Tensor {
            shape,
            data: value,
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }

    fn push_shared(
        &self,
        op: Op,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        requires_grad: bool,
    ) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: Arc::clone(&value),
            requires_grad,
        });
        Tensor {
            shape,
            data: value,
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }

    /// Non-differentiable constant recorded on this graph.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        check_shape_data(&shape, &data);
        self.push(Op::Leaf { param: None }, shape, data, false)
    }

    /// Differentiable leaf (used by tests and ad-hoc optimization).
    pub fn leaf(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        check_shape_data(&shape, &data);
        self.push(Op::Leaf { param: None }, shape, data, true)
    }

    /// Differentiable leaf bound to a stored parameter; shares the parameter
    /// buffer without copying. Gradients land in [`Gradients::param_grads`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.push_shared(
            Op::Leaf { param: Some(id) },
            store.shape(id).to_vec(),
            store.shared(id),
            true,
        )
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Tensor {
    /// Free-standing constant not attached to any graph. Ops between such
    /// tensors fold eagerly; mixing with graph tensors interns it as needed.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        check_shape_data(&shape, &data);
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor::constant(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some(r) => r.graph.inner.borrow().nodes[r.id].requires_grad,
            None => false,
        }
    }

    /// The graph this tensor is recorded on, if any.
    pub fn graph(&self) -> Option<Graph> {
        self.node.as_ref().map(|r| r.graph.clone())
    }

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// Resolve the graph shared by a set of operands, if any.
fn common_graph<'a>(ops: &'static str, tensors: &[&'a Tensor]) -> Result<Option<Graph>> {
    let mut found: Option<Graph> = None;
    for t in tensors {
        if let Some(r) = &t.node {
            match &found {
                None => found = Some(r.graph.clone()),
                Some(g) if g.same_graph(&r.graph) => {}
                Some(_) => {
                    return Err(contract(format!(
                        "{ops}: operands belong to different graphs"
                    )))
                }
            }
        }
    }
    Ok(found)
}

/// Node id of `t` on `graph`, interning detached constants.
fn node_on(graph: &Graph, t: &Tensor) -> NodeId {
    match &t.node {
        Some(r) => r.id,
        None => {
            let mut inner = graph.inner.borrow_mut();
            let id = inner.nodes.len();
            inner.nodes.push(Node {
                op: Op::Leaf { param: None },
                shape: t.shape.clone(),
                value: Arc::clone(&t.data),
                requires_grad: false,
            });
            id
        }
    }
}

fn any_grad(tensors: &[&Tensor]) -> bool {
    tensors.iter().any(|t| t.requires_grad())
}

/// Build the op result: fold eagerly when no operand is on a graph.
fn emit(
    op_name: &'static str,
    operands: &[&Tensor],
    shape: Vec<usize>,
    value: Vec<f64>,
    make_op: impl FnOnce(&Graph) -> Op,
) -> Result<Tensor> {
    match common_graph(op_name, operands)? {
        Some(graph) => {
            let grad = any_grad(operands);
            let op = make_op(&graph);
            Ok(graph.push(op, shape, value, grad))
        }
        None => Ok(Tensor {
            shape,
            data: Arc::new(value),
            node: None,
        }),
    }
}

// ── forward ops ─────────────────────────────────────────────────────

impl Tensor {
    /// Matrix product. Rank-1 operands are promoted to a single row (lhs)
    /// or column (rhs) and the result squeezed back.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k1) = (self.rows(), self.cols());
        let (k2, n) = if other.shape.len() == 2 {
            (other.shape[0], other.shape[1])
        } else {
            (other.shape[0], 1)
        };
        if k1 != k2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let value = linalg::matmul_nn(&self.data, &other.data, m, k1, n);
        let shape = match (self.shape.len(), other.shape.len()) {
            (2, 2) => vec![m, n],
            (1, 2) => vec![n],
            (2, 1) => vec![m],
            _ => vec![1],
        };
        emit("matmul", &[self, other], shape, value, |g| Op::Matmul {
            a: node_on(g, self),
            b: node_on(g, other),
        })
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::DimensionMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let value = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        emit("add", &[self, other], self.shape.clone(), value, |g| {
            Op::Add {
                a: node_on(g, self),
                b: node_on(g, other),
            }
        })
    }

    /// Broadcasts a rank-1 bias over every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.shape.len() != 1 || bias.cols() != self.cols() {
            return Err(TensorError::DimensionMismatch {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let n = self.cols();
        let mut value = self.data.to_vec();
        for row in value.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bias.data.iter()) {
                *v += b;
            }
        }
        emit("add_bias", &[self, bias], self.shape.clone(), value, |g| {
            Op::AddBias {
                x: node_on(g, self),
                b: node_on(g, bias),
            }
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let value = self.data.iter().map(|v| v * c).collect();
        emit("scale", &[self], self.shape.clone(), value, |g| Op::Scale {
            x: node_on(g, self),
            c,
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let value = self.data.iter().map(|v| v.max(0.0)).collect();
        emit("relu", &[self], self.shape.clone(), value, |g| Op::Relu {
            x: node_on(g, self),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(contract("transpose: rank-2 tensor required"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let value = linalg::transpose(&self.data, m, n);
        emit("transpose", &[self], vec![n, m], value, |g| Op::Transpose {
            x: node_on(g, self),
        })
    }

    /// Concatenation along `axis`. Rank-1 tensors concatenate along their
    /// only axis (pass `Axis::Cols`).
    pub fn concat(parts: &[&Tensor], axis: Axis) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(contract("concat: empty part list"));
        }
        let rank = parts[0].shape.len();
        if parts.iter().any(|p| p.shape.len() != rank) {
            return Err(contract("concat: mixed ranks"));
        }
        let (shape, value) = match (rank, axis) {
            (1, _) => {
                let mut v = Vec::new();
                for p in parts {
                    v.extend_from_slice(&p.data);
                }
                (vec![v.len()], v)
            }
            (2, Axis::Rows) => {
                let n = parts[0].shape[1];
                if let Some(bad) = parts.iter().find(|p| p.shape[1] != n) {
                    return Err(TensorError::DimensionMismatch {
                        op: "concat",
                        left: parts[0].shape.clone(),
                        right: bad.shape.clone(),
                    });
                }
                let m: usize = parts.iter().map(|p| p.shape[0]).sum();
                let mut v = Vec::with_capacity(m * n);
                for p in parts {
                    v.extend_from_slice(&p.data);
                }
                (vec![m, n], v)
            }
            (2, Axis::Cols) => {
                let m = parts[0].shape[0];
                if let Some(bad) = parts.iter().find(|p| p.shape[0] != m) {
                    return Err(TensorError::DimensionMismatch {
                        op: "concat",
                        left: parts[0].shape.clone(),
                        right: bad.shape.clone(),
                    });
                }
                let n: usize = parts.iter().map(|p| p.shape[1]).sum();
                let mut v = Vec::with_capacity(m * n);
                for i in 0..m {
                    for p in parts {
                        let w = p.shape[1];
                        v.extend_from_slice(&p.data[i * w..(i + 1) * w]);
                    }
                }
                (vec![m, n], v)
            }
            _ => unreachable!(),
        };
        emit("concat", parts, shape, value, |g| Op::Concat {
            parts: parts.iter().map(|p| node_on(g, p)).collect(),
            axis,
        })
    }

    /// Stacks rank-1 tensors of equal width into a rank-2 tensor.
    pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(contract("stack_rows: empty part list"));
        }
        let n = parts[0].cols();
        for p in parts {
            if p.shape.len() != 1 || p.cols() != n {
                return Err(TensorError::DimensionMismatch {
                    op: "stack_rows",
                    left: vec![n],
                    right: p.shape.clone(),
                });
            }
        }
        let mut v = Vec::with_capacity(parts.len() * n);
        for p in parts {
            v.extend_from_slice(&p.data);
        }
        emit("stack_rows", parts, vec![parts.len(), n], v, |g| {
            Op::StackRows {
                parts: parts.iter().map(|p| node_on(g, p)).collect(),
            }
        })
    }

    /// Extracts row `row` of a rank-2 tensor as a rank-1 tensor.
    pub fn select_row(&self, row: usize) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(contract("select_row: rank-2 tensor required"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        if row >= m {
            return Err(TensorError::IndexOutOfRange {
                op: "select_row",
                index: row,
                size: m,
            });
        }
        let value = self.data[row * n..(row + 1) * n].to_vec();
        emit("select_row", &[self], vec![n], value, |g| Op::SelectRow {
            x: node_on(g, self),
            row,
        })
    }

    /// Contiguous column range `start .. start+width` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(contract("slice_cols: rank-2 tensor required"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        if start + width > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                size: n,
            });
        }
        let mut value = Vec::with_capacity(m * width);
        for row in self.data.chunks(n) {
            value.extend_from_slice(&row[start..start + width]);
        }
        emit("slice_cols", &[self], vec![m, width], value, |g| {
            Op::SliceCols {
                x: node_on(g, self),
                start,
                width,
            }
        })
    }

    /// Numerically stable softmax along `axis` (max-subtraction). Every
    /// slice sums to 1. Rank-1 input normalizes the whole vector.
    pub fn softmax(&self, axis: Axis) -> Result<Tensor> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let value = softmax_forward(&self.data, &self.shape, axis);
        emit("softmax", &[self], self.shape.clone(), value, |g| {
            Op::Softmax {
                x: node_on(g, self),
                axis,
            }
        })
    }

    /// Normalizes each row to zero mean / unit variance, then applies an
    /// elementwise affine `gain * x + bias`. `eps` sits inside the sqrt.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let n = self.cols();
        if gain.shape != [n] || bias.shape != [n] {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                left: self.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let mut value = vec![0.0; self.data.len()];
        for (out, row) in value.chunks_mut(n).zip(self.data.chunks(n)) {
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
            }
        }
        emit(
            "layer_norm",
            &[self, gain, bias],
            self.shape.clone(),
            value,
            |g| Op::LayerNorm {
                x: node_on(g, self),
                gain: node_on(g, gain),
                bias: node_on(g, bias),
                eps,
            },
        )
    }

    /// Gathers rows of an embedding table; `self` is the `[vocab x d]` table.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(contract("embedding_lookup: rank-2 table required"));
        }
        let (v, d) = (self.shape[0], self.shape[1]);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    size: v,
                });
            }
            value.extend_from_slice(&self.data[id * d..(id + 1) * d]);
        }
        emit(
            "embedding_lookup",
            &[self],
            vec![ids.len(), d],
            value,
            |g| Op::Embedding {
                table: node_on(g, self),
                ids: ids.to_vec(),
            },
        )
    }

    /// `-log softmax(logits)[target]`, computed via log-sum-exp.
    pub fn cross_entropy(&self, target: usize) -> Result<Tensor> {
        if self.rows() != 1 {
            return Err(contract("cross_entropy: logits must be a single row"));
        }
        let n = self.cols();
        if target >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                size: n,
            });
        }
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + self
                .data
                .iter()
                .map(|v| (v - max).exp())
                .sum::<f64>()
                .ln();
        let value = vec![lse - self.data[target]];
        emit("cross_entropy", &[self], vec![1], value, |g| {
            Op::CrossEntropy {
                logits: node_on(g, self),
                target,
            }
        })
    }

    /// Inverted dropout: in training, zeroes entries with probability `p`
    /// and scales survivors by `1/(1-p)`; in evaluation it is the identity.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract(format!("dropout: p={p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.data.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self
            .data
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        emit("dropout", &[self], self.shape.clone(), value, |g| {
            Op::Dropout {
                x: node_on(g, self),
                mask,
            }
        })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let value = vec![self.data.iter().sum()];
        emit("sum_all", &[self], vec![1], value, |g| Op::SumAll {
            x: node_on(g, self),
        })
    }

    /// Reverse-mode gradients of a scalar loss w.r.t. every differentiable
    /// leaf reachable from it. Accumulation is additive across uses.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape
            )));
        }
        let node = self
            .node
            .as_ref()
            .ok_or_else(|| contract("backward: loss is not attached to a graph"))?;
        Ok(run_backward(&node.graph, node.id))
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn softmax_forward(data: &[f64], shape: &[usize], axis: Axis) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    match (shape.len(), axis) {
        (1, _) | (2, Axis::Cols) => {
            let n = *shape.last().unwrap();
            for (o, row) in out.chunks_mut(n).zip(data.chunks(n)) {
                softmax_slice(row, o);
            }
        }
        (2, Axis::Rows) => {
            let (m, n) = (shape[0], shape[1]);
            let mut col = vec![0.0; m];
            let mut res = vec![0.0; m];
            for j in 0..n {
                for i in 0..m {
                    col[i] = data[i * n + j];
                }
                softmax_slice(&col, &mut res);
                for i in 0..m {
                    out[i * n + j] = res[i];
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x.iter()) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

// ── backward ────────────────────────────────────────────────────────

/// Gradient buffers produced by one backward pass, keyed by graph node.
pub struct Gradients {
    graph: Graph,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. a tensor on the same graph, if it participated.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let r = t.node.as_ref()?;
        if !r.graph.same_graph(&self.graph) {
            return None;
        }
        self.grads.get(r.id)?.as_deref()
    }

    /// Collects gradients of parameter leaves, summing across multiple
    /// leaves bound to the same parameter.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        let inner = self.graph.inner.borrow();
        for (id, node) in inner.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if let Some(Some(g)) = self.grads.get(id) {
                    out.accumulate(p, g);
                }
            }
        }
        out
    }
}

fn run_backward(graph: &Graph, loss: NodeId) -> Gradients {
    let inner = graph.inner.borrow();
    let n = inner.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
    grads[loss] = Some(vec![1.0]);

    for id in (0..=loss).rev() {
        if grads[id].is_none() || !inner.nodes[id].requires_grad {
            continue;
        }
        let grad_out = grads[id].take().unwrap();
        backprop_node(&inner, id, &grad_out, &mut grads);
        grads[id] = Some(grad_out);
    }
    drop(inner);
    Gradients {
        graph: graph.clone(),
        grads,
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, add: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    add(buf);
}

fn backprop_node(inner: &GraphInner, id: NodeId, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &inner.nodes[id];
    let needs = |i: NodeId| inner.nodes[i].requires_grad;
    let val = |i: NodeId| -> &[f64] { &inner.nodes[i].value };
    let numel = |i: NodeId| -> usize { inner.nodes[i].value.len() };
    let dims = |i: NodeId| -> (usize, usize) {
        let s = &inner.nodes[i].shape;
        if s.len() == 2 {
            (s[0], s[1])
        } else {
            (1, s[0])
        }
    };

    match &node.op {
        Op::Leaf { .. } => {}
        Op::Matmul { a, b } => {
            let (m, k) = dims(*a);
            let bshape = &inner.nodes[*b].shape;
            let nn = if bshape.len() == 2 { bshape[1] } else { 1 };
            if needs(*a) {
                let da = linalg::matmul_nt(grad, val(*b), m, nn, k);
                accumulate(&mut grads[*a], m * k, |buf| {
                    for (x, y) in buf.iter_mut().zip(da) {
                        *x += y;
                    }
                });
            }
            if needs(*b) {
                let db = linalg::matmul_tn(val(*a), grad, k, m, nn);
                accumulate(&mut grads[*b], k * nn, |buf| {
                    for (x, y) in buf.iter_mut().zip(db) {
                        *x += y;
                    }
                });
            }
        }
        Op::Add { a, b } => {
            for &p in [a, b].iter() {
                if needs(*p) {
                    accumulate(&mut grads[*p], numel(*p), |buf| {
                        for (x, g) in buf.iter_mut().zip(grad) {
                            *x += g;
                        }
                    });
                }
            }
        }
        Op::AddBias { x, b } => {
            if needs(*x) {
                accumulate(&mut grads[*x], numel(*x), |buf| {
                    for (o, g) in buf.iter_mut().zip(grad) {
                        *o += g;
                    }
                });
            }
            if needs(*b) {
                let n = numel(*b);
                accumulate(&mut grads[*b], n, |buf| {
                    for row in grad.chunks(n) {
                        for (o, g) in buf.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                });
            }
        }
        Op::Scale { x, c } => {
            if needs(*x) {
                accumulate(&mut grads[*x], numel(*x), |buf| {
                    for (o, g) in buf.iter_mut().zip(grad) {
                        *o += c * g;
                    }
                });
            }
        }
        Op::Relu { x } => {
            if needs(*x) {
                let xv = val(*x);
                accumulate(&mut grads[*x], numel(*x), |buf| {
                    for i in 0..buf.len() {
                        if xv[i] > 0.0 {
                            buf[i] += grad[i];
                        }
                    }
                });
            }
        }
        Op::Transpose { x } => {
            if needs(*x) {
                let (m, n) = dims(*x);
                // grad has shape n x m
                let gt = linalg::transpose(grad, n, m);
                accumulate(&mut grads[*x], m * n, |buf| {
                    for (o, g) in buf.iter_mut().zip(gt) {
                        *o += g;
                    }
                });
            }
        }
        Op::Concat { parts, axis } => match axis {
            Axis::Rows => {
                let mut offset = 0;
                for &p in parts {
                    let len = numel(p);
                    if needs(p) {
                        let slice = &grad[offset..offset + len];
                        accumulate(&mut grads[p], len, |buf| {
                            for (o, g) in buf.iter_mut().zip(slice) {
                                *o += g;
                            }
                        });
                    }
                    offset += len;
                }
            }
            Axis::Cols => {
                let rank1 = inner.nodes[parts[0]].shape.len() == 1;
                if rank1 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = numel(p);
                        if needs(p) {
                            let slice = &grad[offset..offset + len];
                            accumulate(&mut grads[p], len, |buf| {
                                for (o, g) in buf.iter_mut().zip(slice) {
                                    *o += g;
                                }
                            });
                        }
                        offset += len;
                    }
                } else {
                    let total_n: usize = parts.iter().map(|&p| dims(p).1).sum();
                    let m = dims(parts[0]).0;
                    let mut col = 0;
                    for &p in parts {
                        let (_, w) = dims(p);
                        if needs(p) {
                            accumulate(&mut grads[p], m * w, |buf| {
                                for i in 0..m {
                                    let src = &grad[i * total_n + col..i * total_n + col + w];
                                    for (o, g) in buf[i * w..(i + 1) * w].iter_mut().zip(src) {
                                        *o += g;
                                    }
                                }
                            });
                        }
                        col += w;
                    }
                }
            }
        },
        Op::StackRows { parts } => {
            let n = dims(id).1;
            for (i, &p) in parts.iter().enumerate() {
                if needs(p) {
                    let slice = &grad[i * n..(i + 1) * n];
                    accumulate(&mut grads[p], n, |buf| {
                        for (o, g) in buf.iter_mut().zip(slice) {
                            *o += g;
                        }
                    });
                }
            }
        }
        Op::SelectRow { x, row } => {
            if needs(*x) {
                let (_, n) = dims(*x);
                accumulate(&mut grads[*x], numel(*x), |buf| {
                    for (o, g) in buf[row * n..(row + 1) * n].iter_mut().zip(grad) {
                        *o += g;
                    }
                });
            }
        }
        Op::SliceCols { x, start, width } => {
            if needs(*x) {
                let (m, n) = dims(*x);
                accumulate(&mut grads[*x], numel(*x), |buf| {
                    for i in 0..m {
                        let dst = &mut buf[i * n + start..i * n + start + width];
                        let src = &grad[i * width..(i + 1) * width];
                        for (o, g) in dst.iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                });
            }
        }
        Op::Softmax { x, axis } => {
            if needs(*x) {
                let y = &node.value;
                let shape = &node.shape;
                accumulate(&mut grads[*x], numel(*x), |buf| {
                    softmax_backward(y, grad, shape, *axis, buf);
                });
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = val(*x);
            let gv = val(*gain);
            let n = inner.nodes[*gain].shape[0];
            if needs(*bias) {
                accumulate(&mut grads[*bias], n, |buf| {
                    for row in grad.chunks(n) {
                        for (o, g) in buf.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                });
            }
            if needs(*gain) {
                accumulate(&mut grads[*gain], n, |buf| {
                    for (xrow, grow) in xv.chunks(n).zip(grad.chunks(n)) {
                        let (mean, var) = mean_var(xrow);
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..n {
                            buf[j] += grow[j] * (xrow[j] - mean) * inv;
                        }
                    }
                });
            }
            if needs(*x) {
                accumulate(&mut grads[*x], numel(*x), |buf| {
                    for ((xrow, grow), brow) in
                        xv.chunks(n).zip(grad.chunks(n)).zip(buf.chunks_mut(n))
                    {
                        let (mean, var) = mean_var(xrow);
                        let inv = 1.0 / (var + eps).sqrt();
                        let nf = n as f64;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * inv;
                            let dxhat = grow[j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * inv;
                            let dxhat = grow[j] * gv[j];
                            brow[j] +=
                                inv * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                        }
                    }
                });
            }
        }
        Op::Embedding { table, ids } => {
            if needs(*table) {
                let d = dims(*table).1;
                accumulate(&mut grads[*table], numel(*table), |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &grad[i * d..(i + 1) * d];
                        for (o, g) in buf[id * d..(id + 1) * d].iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                });
            }
        }
        Op::CrossEntropy { logits, target } => {
            if needs(*logits) {
                let lv = val(*logits);
                let n = lv.len();
                let mut probs = vec![0.0; n];
                softmax_slice(lv, &mut probs);
                let g = grad[0];
                accumulate(&mut grads[*logits], n, |buf| {
                    for j in 0..n {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        buf[j] += g * (probs[j] - onehot);
                    }
                });
            }
        }
        Op::Dropout { x, mask } => {
            if needs(*x) {
                accumulate(&mut grads[*x], numel(*x), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += grad[i] * mask[i];
                    }
                });
            }
        }
        Op::SumAll { x } => {
            if needs(*x) {
                let g = grad[0];
                accumulate(&mut grads[*x], numel(*x), |buf| {
                    for o in buf.iter_mut() {
                        *o += g;
                    }
                });
            }
        }
    }
}

fn softmax_backward(y: &[f64], grad: &[f64], shape: &[usize], axis: Axis, out: &mut [f64]) {
    match (shape.len(), axis) {
        (1, _) | (2, Axis::Cols) => {
            let n = *shape.last().unwrap();
            for ((yrow, grow), orow) in y.chunks(n).zip(grad.chunks(n)).zip(out.chunks_mut(n)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    orow[j] += yrow[j] * (grow[j] - dot);
                }
            }
        }
        (2, Axis::Rows) => {
            let (m, n) = (shape[0], shape[1]);
            for j in 0..n {
                let mut dot = 0.0;
                for i in 0..m {
                    dot += y[i * n + j] * grad[i * n + j];
                }
                for i in 0..m {
                    out[i * n + j] += y[i * n + j] * (grad[i * n + j] - dot);
                }
            }
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
pub(crate) mod testsupport;

#[cfg(test)]
mod tests;
