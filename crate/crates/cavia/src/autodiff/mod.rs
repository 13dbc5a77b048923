//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations record nodes into a per-episode [`Graph`]. A backward sweep
//! ([`grad`]) computes adjoints *using the same differentiable operations*, so
//! with `retain_for_higher_order = true` the returned gradients are ordinary
//! graph nodes and a second sweep through them is valid. This is what lets an
//! outer-loop update differentiate through an inner-loop gradient step.
//!
//! Graphs are intended to live for one adaptation episode and be dropped
//! afterwards; parameters persist outside the graph as [`TensorData`] and are
//! re-lifted as leaves each episode.

mod kernels;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{CaviaError, Result};

/// Plain tensor storage: shape plus row-major values, independent of any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(CaviaError::Contract(format!(
                "shape {:?} does not match {} values",
                shape,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Identity of a node within its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// How the second operand of a binary op is broadcast against the first.
/// Restricted by design: a bias vector over the last axis, or a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    LastAxis,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Square,
    Relu,
    Tanh,
    Exp,
    Log,
    Recip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
}

/// Operation record: kind, parent ids and the scalars needed for backward.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Binary { kind: BinaryKind, a: NodeId, b: NodeId, bcast: Broadcast },
    Unary { kind: UnaryKind, a: NodeId },
    /// `mul * a + add`; only `mul` is needed for backward.
    Affine { a: NodeId, mul: f64 },
    ConcatLast { a: NodeId, b: NodeId, split: usize, broadcast_rows: bool },
    SliceLast { a: NodeId, start: usize },
    PadLast { a: NodeId, start: usize },
    RepeatRows { a: NodeId },
    RepeatCols { a: NodeId },
    Reduce { kind: ReduceKind, a: NodeId, axis: Option<usize> },
    /// Scalar expanded to the node's own shape.
    BroadcastScalar { a: NodeId },
    Reshape { a: NodeId },
}

impl Op {
    fn parents(&self) -> [Option<NodeId>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Matmul { a, b } | Op::Binary { a, b, .. } | Op::ConcatLast { a, b, .. } => {
                [Some(a), Some(b)]
            }
            Op::Transpose { a }
            | Op::Unary { a, .. }
            | Op::Affine { a, .. }
            | Op::SliceLast { a, .. }
            | Op::PadLast { a, .. }
            | Op::RepeatRows { a, .. }
            | Op::RepeatCols { a, .. }
            | Op::Reduce { a, .. }
            | Op::BroadcastScalar { a }
            | Op::Reshape { a } => [Some(a), None],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

struct GraphInner {
    nodes: Vec<Node>,
    /// While set, newly created nodes are detached (used by non-retaining sweeps).
    force_no_grad: bool,
    /// Node ids whose backward rule fired during the most recent sweep.
    last_backward_visits: Vec<NodeId>,
}

/// Append-only record of operations; cheap to clone (shared handle).
///
/// Confined to one worker: neither `Graph` nor `Tensor` is `Send`.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                force_no_grad: false,
                last_backward_visits: Vec::new(),
            })),
        }
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let rg = requires_grad && !inner.force_no_grad;
        inner.nodes.push(Node {
            shape,
            values,
            op,
            requires_grad: rg,
        });
        Tensor {
            graph: self.clone(),
            id: NodeId(inner.nodes.len() - 1),
        }
    }

    /// Lift plain data into the graph as a leaf.
    pub fn leaf(&self, data: &TensorData, requires_grad: bool) -> Tensor {
        self.push(data.shape.clone(), data.values.clone(), Op::Leaf, requires_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, data: &TensorData) -> Tensor {
        self.leaf(data, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Ok(self.constant(&TensorData::new(shape, values)?))
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(&TensorData::scalar(v))
    }

    pub fn zeros(&self, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        self.leaf(&TensorData::zeros(shape), requires_grad)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids visited by the most recent backward sweep, in sweep order.
    /// Each reachable node's rule fires exactly once per sweep.
    pub fn last_backward_visits(&self) -> Vec<NodeId> {
        self.inner.borrow().last_backward_visits.clone()
    }

    fn same_as(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one node of a [`Graph`]. Cloning is shallow.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: NodeId,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id.0, self.shape())
    }
}

/// Sanity tag for dimension errors raised while accumulating adjoints.
const ACCUM: &str = "grad-accumulate";

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id.0].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id.0].values.len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id.0].values.clone()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id.0];
        assert_eq!(node.values.len(), 1, "value() on non-scalar tensor");
        node.values[0]
    }

    pub fn data(&self) -> TensorData {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id.0];
        TensorData {
            shape: node.shape.clone(),
            values: node.values.clone(),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id.0].requires_grad
    }

    /// Non-differentiable copy of this tensor's current values.
    pub fn detach(&self) -> Tensor {
        self.graph.constant(&self.data())
    }

    fn check_same_graph(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.graph.same_as(&other.graph) {
            Ok(())
        } else {
            Err(CaviaError::Contract(format!("{op}: operands belong to different graphs")))
        }
    }

    fn finite_checked(t: Tensor, op: &'static str) -> Result<Tensor> {
        let ok = {
            let inner = t.graph.inner.borrow();
            inner.nodes[t.id.0].values.iter().all(|v| v.is_finite())
        };
        if ok {
            Ok(t)
        } else {
            Err(CaviaError::NonFinite { op })
        }
    }

    // ---- linear algebra ----

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_graph(other, "matmul")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CaviaError::Dimension { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let na = &inner.nodes[self.id.0];
            let nb = &inner.nodes[other.id.0];
            (
                kernels::matmul(&na.values, &nb.values, m, k, n),
                na.requires_grad || nb.requires_grad,
            )
        };
        let t = self.graph.push(vec![m, n], values, Op::Matmul { a: self.id, b: other.id }, rg);
        Self::finite_checked(t, "matmul")
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(CaviaError::Dimension { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            (kernels::transpose(&n.values, s[0], s[1]), n.requires_grad)
        };
        Ok(self.graph.push(vec![s[1], s[0]], values, Op::Transpose { a: self.id }, rg))
    }

    // ---- elementwise ----

    fn binary(&self, other: &Tensor, kind: BinaryKind, op_name: &'static str) -> Result<Tensor> {
        self.check_same_graph(other, op_name)?;
        let (sa, sb) = (self.shape(), other.shape());
        // Resolve broadcasting: equal shapes, a bias vector over the last
        // axis, or a scalar. Commutative ops also accept the bias on the left.
        let (lhs, rhs, bcast) = if sa == sb {
            (self, other, Broadcast::None)
        } else if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            (self, other, Broadcast::LastAxis)
        } else if sb.is_empty() {
            (self, other, Broadcast::Scalar)
        } else if sa.len() == 1 && sb.len() == 2 && sb[1] == sa[0] && kind != BinaryKind::Sub {
            (other, self, Broadcast::LastAxis)
        } else if sa.is_empty() && kind != BinaryKind::Sub {
            (other, self, Broadcast::Scalar)
        } else {
            return Err(CaviaError::Dimension { op: op_name, lhs: sa, rhs: sb });
        };
        lhs.binary_resolved(rhs, kind, bcast, op_name)
    }

    fn binary_resolved(
        &self,
        rhs: &Tensor,
        kind: BinaryKind,
        bcast: Broadcast,
        op_name: &'static str,
    ) -> Result<Tensor> {
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let shape = self.shape();
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let na = &inner.nodes[self.id.0];
            let nb = &inner.nodes[rhs.id.0];
            let values = match bcast {
                Broadcast::None => kernels::zip_map(&na.values, &nb.values, f),
                Broadcast::LastAxis => {
                    let cols = *shape.last().unwrap();
                    kernels::zip_map_bias(&na.values, &nb.values, cols, f)
                }
                Broadcast::Scalar => {
                    let y = nb.values[0];
                    na.values.iter().map(|&x| f(x, y)).collect()
                }
            };
            (values, na.requires_grad || nb.requires_grad)
        };
        let t = self.graph.push(
            shape,
            values,
            Op::Binary { kind, a: self.id, b: rhs.id, bcast },
            rg,
        );
        Self::finite_checked(t, op_name)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    fn unary(&self, kind: UnaryKind, op_name: &'static str) -> Result<Tensor> {
        let f = match kind {
            UnaryKind::Square => |x: f64| x * x,
            UnaryKind::Relu => |x: f64| if x > 0.0 { x } else { 0.0 },
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Recip => |x: f64| 1.0 / x,
        };
        let shape = self.shape();
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            (n.values.iter().map(|&x| f(x)).collect(), n.requires_grad)
        };
        let t = self.graph.push(shape, values, Op::Unary { kind, a: self.id }, rg);
        Self::finite_checked(t, op_name)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Square, "square")
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Relu, "relu")
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Tanh, "tanh")
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Exp, "exp")
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Log, "log")
    }

    pub fn recip(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Recip, "recip")
    }

    /// `mul * self + add` with constant coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Tensor> {
        let shape = self.shape();
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            (n.values.iter().map(|&x| mul * x + add).collect(), n.requires_grad)
        };
        let t = self.graph.push(shape, values, Op::Affine { a: self.id, mul }, rg);
        Self::finite_checked(t, "affine")
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.affine(c, 0.0)
    }

    /// Add a constant.
    pub fn add_const(&self, c: f64) -> Result<Tensor> {
        self.affine(1.0, c)
    }

    // ---- shape ops ----

    /// Concatenate along the last axis. `other` may be a vector broadcast
    /// across the rows of a rank-2 `self`.
    pub fn concat_last(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_graph(other, "concat_last_axis")?;
        let (sa, sb) = (self.shape(), other.shape());
        let (shape, broadcast_rows, split) = match (sa.len(), sb.len()) {
            (1, 1) => (vec![sa[0] + sb[0]], false, sa[0]),
            (2, 2) if sa[0] == sb[0] => (vec![sa[0], sa[1] + sb[1]], false, sa[1]),
            (2, 1) => (vec![sa[0], sa[1] + sb[0]], true, sa[1]),
            _ => return Err(CaviaError::Dimension { op: "concat_last_axis", lhs: sa, rhs: sb }),
        };
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let na = &inner.nodes[self.id.0];
            let nb = &inner.nodes[other.id.0];
            let values = if broadcast_rows {
                kernels::concat_rows_broadcast(&na.values, &nb.values, shape[0], split)
            } else if shape.len() == 1 {
                let mut v = na.values.clone();
                v.extend_from_slice(&nb.values);
                v
            } else {
                kernels::concat_rows(&na.values, &nb.values, shape[0], split, sb[1])
            };
            (values, na.requires_grad || nb.requires_grad)
        };
        Ok(self.graph.push(
            shape,
            values,
            Op::ConcatLast { a: self.id, b: other.id, split, broadcast_rows },
            rg,
        ))
    }

    /// Take `len` entries of the last axis starting at `start`.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        let last = *s.last().ok_or(CaviaError::InvalidAxis {
            op: "slice_last",
            axis: 0,
            shape: s.clone(),
        })?;
        if start + len > last {
            return Err(CaviaError::Dimension { op: "slice_last", lhs: s, rhs: vec![start, len] });
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = len;
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            (kernels::slice_last(&n.values, last, start, len), n.requires_grad)
        };
        Ok(self.graph.push(shape, values, Op::SliceLast { a: self.id, start }, rg))
    }

    /// Embed the last axis into a zero tensor of width `total` at `start`.
    fn pad_last(&self, start: usize, total: usize) -> Result<Tensor> {
        let s = self.shape();
        let last = *s.last().ok_or(CaviaError::InvalidAxis {
            op: "pad_last",
            axis: 0,
            shape: s.clone(),
        })?;
        if start + last > total {
            return Err(CaviaError::Dimension { op: "pad_last", lhs: s, rhs: vec![start, total] });
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = total;
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            (kernels::pad_last(&n.values, last, start, total), n.requires_grad)
        };
        Ok(self.graph.push(shape, values, Op::PadLast { a: self.id, start }, rg))
    }

    /// Tile a vector `[f]` into `[rows x f]`.
    pub fn repeat_rows(&self, rows: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(CaviaError::Dimension { op: "repeat_rows", lhs: s, rhs: vec![rows] });
        }
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            (kernels::repeat_rows(&n.values, rows), n.requires_grad)
        };
        Ok(self.graph.push(vec![rows, s[0]], values, Op::RepeatRows { a: self.id }, rg))
    }

    /// Tile a vector `[m]` into `[m x cols]`.
    pub fn repeat_cols(&self, cols: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(CaviaError::Dimension { op: "repeat_cols", lhs: s, rhs: vec![cols] });
        }
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            (kernels::repeat_cols(&n.values, cols), n.requires_grad)
        };
        Ok(self.graph.push(vec![s[0], cols], values, Op::RepeatCols { a: self.id }, rg))
    }

    /// Expand a scalar to `shape`.
    pub fn broadcast_scalar(&self, shape: Vec<usize>) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(CaviaError::Dimension { op: "broadcast_scalar", lhs: self.shape(), rhs: shape });
        }
        let (v, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            (n.values[0], n.requires_grad)
        };
        let count = shape.iter().product();
        Ok(self.graph.push(shape, vec![v; count], Op::BroadcastScalar { a: self.id }, rg))
    }

    /// Same values, different shape (sizes must agree).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(CaviaError::Dimension { op: "reshape", lhs: self.shape(), rhs: shape });
        }
        let (values, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            (n.values.clone(), n.requires_grad)
        };
        Ok(self.graph.push(shape, values, Op::Reshape { a: self.id }, rg))
    }

    // ---- reductions ----

    fn reduce(&self, kind: ReduceKind, axis: Option<usize>, op_name: &'static str) -> Result<Tensor> {
        let s = self.shape();
        if let Some(ax) = axis {
            if ax >= s.len() {
                return Err(CaviaError::InvalidAxis { op: op_name, axis: ax, shape: s });
            }
        }
        let (shape, mut values, extent, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id.0];
            match (axis, s.len()) {
                (None, _) | (Some(0), 1) => {
                    (vec![], vec![kernels::sum_all(&n.values)], n.values.len(), n.requires_grad)
                }
                (Some(0), 2) => (
                    vec![s[1]],
                    kernels::sum_axis0(&n.values, s[0], s[1]),
                    s[0],
                    n.requires_grad,
                ),
                (Some(1), 2) => {
                    (vec![s[0]], kernels::sum_axis1(&n.values, s[1]), s[1], n.requires_grad)
                }
                _ => {
                    return Err(CaviaError::InvalidAxis {
                        op: op_name,
                        axis: axis.unwrap_or(0),
                        shape: s,
                    })
                }
            }
        };
        if kind == ReduceKind::Mean {
            let inv = 1.0 / extent as f64;
            for v in &mut values {
                *v *= inv;
            }
        }
        let t = self.graph.push(shape, values, Op::Reduce { kind, a: self.id, axis }, rg);
        Self::finite_checked(t, op_name)
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, axis, "sum")
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, axis, "mean")
    }
}

/// Mean squared error over all entries of equally shaped tensors.
pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (sp, st) = (pred.shape(), target.shape());
    if sp != st {
        return Err(CaviaError::Dimension { op: "loss_mse", lhs: sp, rhs: st });
    }
    if pred.numel() == 0 {
        return Err(CaviaError::Contract("loss_mse: empty prediction".into()));
    }
    pred.sub(target)?.square()?.mean(None)
}

/// Mean negative log-softmax of the true class, stabilized by subtracting
/// the per-row maximum (treated as a constant, which leaves all derivatives
/// unchanged away from ties).
pub fn loss_softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(CaviaError::Dimension { op: "loss_softmax_xent", lhs: s, rhs: vec![labels.len()] });
    }
    let (rows, classes) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CaviaError::Domain(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let vals = logits.values();
    let graph = logits.graph().clone();
    let mut maxes = Vec::with_capacity(rows);
    let mut onehot = vec![0.0; rows * classes];
    for r in 0..rows {
        let row = &vals[r * classes..(r + 1) * classes];
        maxes.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        onehot[r * classes + labels[r]] = 1.0;
    }
    let max_col = graph.constant(&TensorData::vector(maxes));
    let max_mat = max_col.repeat_cols(classes)?;
    let onehot = graph.constant(&TensorData::new(vec![rows, classes], onehot)?);

    let shifted = logits.sub(&max_mat)?;
    let logsumexp = shifted.exp()?.sum(Some(1))?.log()?.add(&max_col)?;
    let true_logit = logits.mul(&onehot)?.sum(Some(1))?;
    logsumexp.sub(&true_logit)?.mean(None)
}

/// Gradients keyed by the node id of each requested tensor.
#[derive(Debug)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.grads.get(&t.id())
    }

    /// Gradient for `t`; panics if `t` was not in the `wrt` list.
    pub fn gradient(&self, t: &Tensor) -> &Tensor {
        self.get(t).expect("tensor was not in the wrt list")
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Euclidean norm over all gradients in the map.
    pub fn l2_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.values().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Restores the graph's detach flag when a sweep exits (even on error).
struct DetachGuard {
    graph: Graph,
    prev: bool,
}

impl Drop for DetachGuard {
    fn drop(&mut self) {
        self.graph.inner.borrow_mut().force_no_grad = self.prev;
    }
}

/// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
///
/// With `retain_for_higher_order`, adjoints stay attached to the graph and a
/// further [`grad`] call through them is valid; otherwise the returned
/// gradients are detached constants. Tensors unreachable from `output` get a
/// zero gradient.
pub fn grad(output: &Tensor, wrt: &[&Tensor], retain_for_higher_order: bool) -> Result<GradientMap> {
    let graph = output.graph().clone();
    if output.numel() != 1 {
        return Err(CaviaError::Contract(format!(
            "grad requires a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    for w in wrt {
        if !graph.same_as(w.graph()) {
            return Err(CaviaError::Contract("grad: wrt tensor from a different graph".into()));
        }
    }
    let out_id = output.id().0;

    // Ancestors of the output that can influence it and require gradients.
    let needed = {
        let inner = graph.inner.borrow();
        let mut needed = vec![false; out_id + 1];
        if inner.nodes[out_id].requires_grad {
            needed[out_id] = true;
            let mut stack = vec![out_id];
            while let Some(id) = stack.pop() {
                for parent in inner.nodes[id].op.parents().into_iter().flatten() {
                    let p = parent.0;
                    if !needed[p] && inner.nodes[p].requires_grad {
                        needed[p] = true;
                        stack.push(p);
                    }
                }
            }
        }
        needed
    };

    let _guard = {
        let mut inner = graph.inner.borrow_mut();
        inner.last_backward_visits.clear();
        let prev = inner.force_no_grad;
        inner.force_no_grad = !retain_for_higher_order;
        DetachGuard { graph: graph.clone(), prev }
    };

    let mut adjoints: Vec<Option<Tensor>> = vec![None; out_id + 1];
    if needed[out_id] {
        let ones = TensorData {
            shape: output.shape(),
            values: vec![1.0],
        };
        adjoints[out_id] = Some(graph.constant(&ones));
        for id in (0..=out_id).rev() {
            if !needed[id] {
                continue;
            }
            let Some(adj) = adjoints[id].clone() else { continue };
            graph.inner.borrow_mut().last_backward_visits.push(NodeId(id));
            backward_step(&graph, NodeId(id), &adj, &needed, &mut adjoints)?;
        }
    }
    drop(_guard);

    let mut grads = HashMap::with_capacity(wrt.len());
    for w in wrt {
        let found = if w.id().0 < needed.len() { adjoints[w.id().0].clone() } else { None };
        let g = match found {
            Some(g) => g,
            None => graph.constant(&TensorData::zeros(w.shape())),
        };
        debug_assert_eq!(g.shape(), w.shape());
        grads.insert(w.id(), g);
    }
    Ok(GradientMap { grads })
}

fn accumulate(
    adjoints: &mut [Option<Tensor>],
    parent: NodeId,
    contribution: Tensor,
) -> Result<()> {
    let slot = &mut adjoints[parent.0];
    *slot = Some(match slot.take() {
        None => contribution,
        Some(prev) => prev.add(&contribution).map_err(|_| CaviaError::Contract(ACCUM.into()))?,
    });
    Ok(())
}

/// Apply one node's backward rule, pushing adjoint contributions to parents.
/// Every rule is expressed through differentiable graph operations so that a
/// retained sweep can itself be differentiated.
fn backward_step(
    graph: &Graph,
    id: NodeId,
    adj: &Tensor,
    needed: &[bool],
    adjoints: &mut [Option<Tensor>],
) -> Result<()> {
    let op = graph.inner.borrow().nodes[id.0].op.clone();
    let tensor = |nid: NodeId| Tensor { graph: graph.clone(), id: nid };
    let out = tensor(id);
    let wants = |nid: NodeId| needed[nid.0];

    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            if wants(a) {
                let contrib = adj.matmul(&tensor(b).transpose()?)?;
                accumulate(adjoints, a, contrib)?;
            }
            if wants(b) {
                let contrib = tensor(a).transpose()?.matmul(adj)?;
                accumulate(adjoints, b, contrib)?;
            }
        }
        Op::Transpose { a } => {
            if wants(a) {
                accumulate(adjoints, a, adj.transpose()?)?;
            }
        }
        Op::Binary { kind, a, b, bcast } => {
            let reduce_to_b = |g: &Tensor| -> Result<Tensor> {
                match bcast {
                    Broadcast::None => Ok(g.clone()),
                    Broadcast::LastAxis => g.sum(Some(0)),
                    Broadcast::Scalar => g.sum(None),
                }
            };
            match kind {
                BinaryKind::Add => {
                    if wants(a) {
                        accumulate(adjoints, a, adj.clone())?;
                    }
                    if wants(b) {
                        accumulate(adjoints, b, reduce_to_b(adj)?)?;
                    }
                }
                BinaryKind::Sub => {
                    if wants(a) {
                        accumulate(adjoints, a, adj.clone())?;
                    }
                    if wants(b) {
                        accumulate(adjoints, b, reduce_to_b(adj)?.scale(-1.0)?)?;
                    }
                }
                BinaryKind::Mul => {
                    if wants(a) {
                        let contrib = adj.binary_resolved(&tensor(b), BinaryKind::Mul, bcast, "mul")?;
                        accumulate(adjoints, a, contrib)?;
                    }
                    if wants(b) {
                        let prod = adj.mul(&tensor(a))?;
                        accumulate(adjoints, b, reduce_to_b(&prod)?)?;
                    }
                }
            }
        }
        Op::Unary { kind, a } => {
            if wants(a) {
                let pa = tensor(a);
                let contrib = match kind {
                    UnaryKind::Square => adj.mul(&pa)?.scale(2.0)?,
                    UnaryKind::Relu => {
                        let mask: Vec<f64> = graph.inner.borrow().nodes[a.0]
                            .values
                            .iter()
                            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                            .collect();
                        let mask = graph.constant(&TensorData { shape: pa.shape(), values: mask });
                        adj.mul(&mask)?
                    }
                    UnaryKind::Tanh => adj.mul(&out.square()?.affine(-1.0, 1.0)?)?,
                    UnaryKind::Exp => adj.mul(&out)?,
                    UnaryKind::Log => adj.mul(&pa.recip()?)?,
                    UnaryKind::Recip => adj.mul(&out.square()?)?.scale(-1.0)?,
                };
                accumulate(adjoints, a, contrib)?;
            }
        }
        Op::Affine { a, mul } => {
            if wants(a) {
                accumulate(adjoints, a, adj.scale(mul)?)?;
            }
        }
        Op::ConcatLast { a, b, split, broadcast_rows } => {
            let q = *graph.inner.borrow().nodes[b.0].shape.last().unwrap_or(&0);
            if wants(a) {
                accumulate(adjoints, a, adj.slice_last(0, split)?)?;
            }
            if wants(b) {
                let part = adj.slice_last(split, q)?;
                let contrib = if broadcast_rows { part.sum(Some(0))? } else { part };
                accumulate(adjoints, b, contrib)?;
            }
        }
        Op::SliceLast { a, start } => {
            if wants(a) {
                let total = *graph.inner.borrow().nodes[a.0].shape.last().unwrap();
                accumulate(adjoints, a, adj.pad_last(start, total)?)?;
            }
        }
        Op::PadLast { a, start } => {
            if wants(a) {
                let len = *graph.inner.borrow().nodes[a.0].shape.last().unwrap();
                accumulate(adjoints, a, adj.slice_last(start, len)?)?;
            }
        }
        Op::RepeatRows { a } => {
            if wants(a) {
                accumulate(adjoints, a, adj.sum(Some(0))?)?;
            }
        }
        Op::RepeatCols { a } => {
            if wants(a) {
                accumulate(adjoints, a, adj.sum(Some(1))?)?;
            }
        }
        Op::Reduce { kind, a, axis } => {
            if wants(a) {
                let pshape = graph.inner.borrow().nodes[a.0].shape.clone();
                let expanded = match (axis, pshape.len()) {
                    (None, _) | (Some(0), 1) => adj.broadcast_scalar(pshape.clone())?,
                    (Some(0), 2) => adj.repeat_rows(pshape[0])?,
                    (Some(1), 2) => adj.repeat_cols(pshape[1])?,
                    _ => unreachable!("validated at construction"),
                };
                let contrib = match kind {
                    ReduceKind::Sum => expanded,
                    ReduceKind::Mean => {
                        let extent = match (axis, pshape.len()) {
                            (None, _) | (Some(0), 1) => pshape.iter().product(),
                            (Some(0), 2) => pshape[0],
                            _ => pshape[1],
                        };
                        expanded.scale(1.0 / extent as f64)?
                    }
                };
                accumulate(adjoints, a, contrib)?;
            }
        }
        Op::BroadcastScalar { a } => {
            if wants(a) {
                accumulate(adjoints, a, adj.sum(None)?)?;
            }
        }
        Op::Reshape { a } => {
            if wants(a) {
                let pshape = graph.inner.borrow().nodes[a.0].shape.clone();
                accumulate(adjoints, a, adj.reshape(pshape)?)?;
            }
        }
    }
    Ok(())
}
