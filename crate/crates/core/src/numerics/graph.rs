//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! A [`ComputeGraph`] is built once from primitive operations, evaluated
//! against a [`ParamStore`] and a list of input tensors, and then
//! back-propagated from its scalar output. Gradients of trainable parameter
//! leaves are *added* into the store's gradient buffers; callers zero them
//! between batches.
//!
//! ```
//! use mist_core::numerics::{ComputeGraph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! store.insert("theta", Tensor::scalar(3.0)).unwrap();
//!
//! let mut g = ComputeGraph::new();
//! let t = g.param("theta");
//! let sq = g.mul(t, t);
//! g.evaluate(&store, &[]).unwrap();
//! g.backward(sq, &mut store).unwrap();
//! assert_eq!(store.grad("theta").unwrap().data(), &[6.0]);
//! ```

use std::fmt;

use super::tensor::{gemm, gemm_nt, gemm_tn, log_softmax_rows, softmax_rows};
use super::{NumericsError, ParamStore, Tensor};

/// Handle to a node of a [`ComputeGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    Param {
        name: String,
        trainable: bool,
    },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulT(NodeId, NodeId),
    /// Elementwise; a rank-1 right operand is broadcast over the rows of a matrix.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    RowSum(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    L2Normalize(NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    Element(NodeId, usize),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param { .. } => "param",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::L2Normalize(_) => "l2_normalize",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::Element(..) => "element",
        }
    }
}

/// Identifies a node in error messages: position, primitive and optional label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRef {
    pub index: usize,
    pub kind: &'static str,
    pub label: Option<String>,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} ({})", self.index, self.kind)?;
        if let Some(l) = &self.label {
            write!(f, " '{l}'")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// An acyclic graph of tensor primitives. Nodes only reference earlier nodes,
/// so insertion order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for dep in deps(&op) {
            assert!(dep.0 < self.nodes.len(), "node {dep:?} is not in this graph");
        }
        self.nodes.push(Node { op, label: None });
        self.values.clear();
        NodeId(self.nodes.len() - 1)
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, node: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[node.0].label = Some(label.into());
        node
    }

    /// Leaf bound to `inputs[slot]` at evaluation time.
    pub fn input(&mut self, slot: usize) -> NodeId {
        self.push(Op::Input(slot))
    }

    /// Trainable leaf read from the parameter store.
    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param {
            name: name.into(),
            trainable: true,
        })
    }

    /// Parameter leaf that never receives a gradient.
    pub fn frozen_param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param {
            name: name.into(),
            trainable: false,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// `a * b^T`, the pairwise inner products of the rows of `a` and `b`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn div_scalar(&mut self, a: NodeId, divisor: f64) -> NodeId {
        self.push(Op::Scale(a, 1.0 / divisor))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// Per-row sums of a matrix, as a rank-1 tensor.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2Normalize(a))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatRows(a, b))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceRows(a, start, end))
    }

    /// One element (by flat row-major index) as a rank-0 tensor.
    pub fn element(&mut self, a: NodeId, index: usize) -> NodeId {
        self.push(Op::Element(a, index))
    }

    fn node_ref(&self, i: usize) -> NodeRef {
        NodeRef {
            index: i,
            kind: self.nodes[i].op.kind(),
            label: self.nodes[i].label.clone(),
        }
    }

    fn shape_err(&self, i: usize, detail: String) -> NumericsError {
        NumericsError::Shape {
            node: self.node_ref(i),
            detail,
        }
    }

    /// Runs the forward pass, caching every intermediate value, and returns
    /// the value of the last node.
    pub fn evaluate(&mut self, store: &ParamStore, inputs: &[Tensor]) -> Result<Tensor, NumericsError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for i in 0..self.nodes.len() {
            let v = self.forward_node(i, &values, store, inputs)?;
            values.push(v);
        }
        self.values = values;
        self.values.last().cloned().ok_or(NumericsError::EmptyGraph)
    }

    /// Cached forward value of a node, available after [`evaluate`](Self::evaluate).
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0)
    }

    fn forward_node(
        &self,
        i: usize,
        values: &[Tensor],
        store: &ParamStore,
        inputs: &[Tensor],
    ) -> Result<Tensor, NumericsError> {
        let val = |n: &NodeId| &values[n.0];
        let out = match &self.nodes[i].op {
            Op::Input(slot) => inputs
                .get(*slot)
                .cloned()
                .ok_or_else(|| self.shape_err(i, format!("missing input slot {slot}")))?,
            Op::Param { name, .. } => store
                .get(name)
                .cloned()
                .ok_or_else(|| self.shape_err(i, format!("unknown parameter '{name}'")))?,
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                    return Err(self.shape_err(i, format!("cannot multiply {:?} by {:?}", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                Tensor::new(vec![m, n], gemm(m, k, n, a.data(), b.data()))?
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                    return Err(self.shape_err(
                        i,
                        format!("cannot multiply {:?} by transpose of {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                Tensor::new(vec![m, n], gemm_nt(m, k, n, a.data(), b.data()))?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let f: fn(f64, f64) -> f64 = match &self.nodes[i].op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                self.binary(i, ta, tb, f)?
            }
            Op::Exp(a) => map(val(a), f64::exp),
            Op::Log(a) => {
                let a = val(a);
                if a.data().iter().any(|&v| v <= 0.0) {
                    return Err(NumericsError::Domain {
                        node: self.node_ref(i),
                        detail: "log of a non-positive value".into(),
                    });
                }
                map(a, f64::ln)
            }
            Op::Tanh(a) => map(val(a), f64::tanh),
            Op::Scale(a, c) => {
                let c = *c;
                map(val(a), |v| v * c)
            }
            Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
            Op::RowSum(a) => {
                let a = val(a);
                Tensor::vector((0..a.rows()).map(|r| a.row(r).iter().sum()).collect())
            }
            Op::Softmax(a) => {
                let a = val(a);
                Tensor::new(a.shape().to_vec(), softmax_rows(a.data(), a.cols()))?
            }
            Op::LogSoftmax(a) => {
                let a = val(a);
                Tensor::new(a.shape().to_vec(), log_softmax_rows(a.data(), a.cols()))?
            }
            Op::L2Normalize(a) => {
                let a = val(a);
                let c = a.cols();
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(c.max(1)) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 || !norm.is_finite() {
                        return Err(NumericsError::Domain {
                            node: self.node_ref(i),
                            detail: "cannot normalize a zero-norm row".into(),
                        });
                    }
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                    return Err(self.shape_err(i, format!("cannot stack {:?} on {:?}", b.shape(), a.shape())));
                }
                let mut data = a.data().to_vec();
                data.extend_from_slice(b.data());
                Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)?
            }
            Op::SliceRows(a, start, end) => {
                let a = val(a);
                if a.rank() != 2 || start > end || *end > a.rows() {
                    return Err(self.shape_err(i, format!("rows {start}..{end} out of bounds for {:?}", a.shape())));
                }
                a.slice_rows(*start, *end)
            }
            Op::Element(a, idx) => {
                let a = val(a);
                let v = a
                    .data()
                    .get(*idx)
                    .copied()
                    .ok_or_else(|| self.shape_err(i, format!("element {idx} out of bounds for {:?}", a.shape())))?;
                Tensor::scalar(v)
            }
        };
        Ok(out)
    }

    fn binary(&self, i: usize, a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(a.shape().to_vec(), data);
        }
        if a.rank() == 2 && b.rank() == 1 && b.len() == a.cols() {
            let c = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| f(x, b.data()[k % c]))
                .collect();
            return Tensor::new(a.shape().to_vec(), data);
        }
        Err(self.shape_err(i, format!("incompatible operands {:?} and {:?}", a.shape(), b.shape())))
    }

    /// Back-propagates from the scalar `output`, adding the gradient of every
    /// trainable parameter leaf into `store`. Requires a prior `evaluate`.
    pub fn backward(&self, output: NodeId, store: &mut ParamStore) -> Result<(), NumericsError> {
        if self.values.len() != self.nodes.len() {
            return Err(NumericsError::NotEvaluated);
        }
        if self.values[output.0].len() != 1 {
            return Err(NumericsError::NonScalarOutput {
                node: self.node_ref(output.0),
                shape: self.values[output.0].shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out = &self.values[i];
            match &self.nodes[i].op {
                Op::Input(_) | Op::Constant(_) => {}
                Op::Param { name, trainable } => {
                    if *trainable {
                        let buf = store
                            .grad_mut(name)
                            .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
                        for (d, s) in buf.data_mut().iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    accumulate(&mut grads, *a, gemm_nt(m, n, k, &g, tb.data()));
                    accumulate(&mut grads, *b, gemm_tn(k, m, n, ta.data(), &g));
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    accumulate(&mut grads, *a, gemm(m, n, k, &g, tb.data()));
                    accumulate(&mut grads, *b, gemm_tn(n, m, k, &g, ta.data()));
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    let tb = &self.values[b.0];
                    let gb: Vec<f64> = if tb.len() == g.len() {
                        g.iter().map(|v| sign * v).collect()
                    } else {
                        let c = tb.len();
                        let mut acc = vec![0.0; c];
                        for (k, v) in g.iter().enumerate() {
                            acc[k % c] += sign * v;
                        }
                        acc
                    };
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                    if ta.len() == tb.len() {
                        let ga = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                        let gb = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, ga);
                        accumulate(&mut grads, *b, gb);
                    } else {
                        let c = tb.len();
                        let ga = g.iter().enumerate().map(|(k, x)| x * tb.data()[k % c]).collect();
                        let mut gb = vec![0.0; c];
                        for (k, x) in g.iter().enumerate() {
                            gb[k % c] += x * ta.data()[k];
                        }
                        accumulate(&mut grads, *a, ga);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Exp(a) => {
                    let ga = g.iter().zip(out.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ta = &self.values[a.0];
                    let ga = g.iter().zip(ta.data()).map(|(x, y)| x / y).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.iter().zip(out.data()).map(|(x, y)| x * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|x| x * c).collect());
                }
                Op::Sum(a) => {
                    let n = self.values[a.0].len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::RowSum(a) => {
                    let ta = &self.values[a.0];
                    let c = ta.cols();
                    let ga = (0..ta.len()).map(|k| g[k / c]).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, sr), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(sr).map(|(x, y)| x * y).sum();
                        for ((d, x), s) in dst.iter_mut().zip(gr).zip(sr) {
                            *d = s * (x - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let c = out.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, lr), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, x), l) in dst.iter_mut().zip(gr).zip(lr) {
                            *d = x - l.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::L2Normalize(a) => {
                    let ta = &self.values[a.0];
                    let c = out.cols();
                    let mut ga = vec![0.0; g.len()];
                    for (((gr, yr), xr), dst) in g
                        .chunks(c)
                        .zip(out.data().chunks(c))
                        .zip(ta.data().chunks(c))
                        .zip(ga.chunks_mut(c))
                    {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = (x - y * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.values[a.0].len();
                    let gb = g[split..].to_vec();
                    let mut ga = g;
                    ga.truncate(split);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SliceRows(a, start, _) => {
                    let ta = &self.values[a.0];
                    let c = ta.cols();
                    let mut ga = vec![0.0; ta.len()];
                    ga[start * c..start * c + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Element(a, idx) => {
                    let mut ga = vec![0.0; self.values[a.0].len()];
                    ga[*idx] = g[0];
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(())
    }
}

fn deps(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input(_) | Op::Param { .. } | Op::Constant(_) => vec![],
        Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatRows(a, b) => {
            vec![*a, *b]
        }
        Op::Exp(a)
        | Op::Log(a)
        | Op::Tanh(a)
        | Op::Scale(a, _)
        | Op::Sum(a)
        | Op::RowSum(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::L2Normalize(a)
        | Op::SliceRows(a, ..)
        | Op::Element(a, _) => vec![*a],
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("map preserves length")
}

fn accumulate(grads: &mut [Option<Vec<f64>>], node: NodeId, g: Vec<f64>) {
    match &mut grads[node.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
