//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation records its inputs and eagerly
//! computes its value, so the tape is already topologically ordered.
//! [`Graph::backward`] walks it once in reverse from a scalar loss node and
//! accumulates gradients for every parameter leaf. The forward arithmetic
//! here is the single source of truth — evaluation paths reuse the same
//! kernels so that a value computed with or without gradients is identical.

use ndarray::{s, Array2};
use rand::Rng;

use super::{Gradients, ModelError, ModelParams};
use crate::rng::rng_from;

/// Handle to a node in a [`Graph`].
pub type NodeId = usize;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - log_sum);
    }
    out
}

/// Square-matrix row softmax where row `i` may attend to columns `0..=i`;
/// masked columns are exactly zero.
fn causal_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let n = scores.nrows();
    assert_eq!(n, scores.ncols(), "causal softmax needs a square score matrix");
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let max = scores.slice(s![i, ..=i]).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (scores[[i, j]] - max).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..=i {
            out[[i, j]] /= sum;
        }
    }
    out
}

enum Op {
    /// Trainable leaf; gradient flows into `Gradients::tensors[index]`.
    Param(usize),
    /// Non-trainable input.
    Const,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Softplus(NodeId),
    CausalSoftmax(NodeId),
    LogSoftmaxRows(NodeId),
    /// Row lookup: output row `i` is input row `indices[i]`.
    GatherRows(NodeId, Vec<usize>),
    VStack(Vec<NodeId>),
    HStack(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    /// Sum of the entries at the given positions, as a 1x1 node.
    PickSum(NodeId, Vec<(usize, usize)>),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Eagerly evaluated gradient tape over a fixed parameter set.
pub struct Graph<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Graph<'p> {
        Graph { params, nodes: Vec::new() }
    }

    /// Shape of the parameter set this tape reads from.
    pub fn config(&self) -> &super::ModelConfig {
        &self.params.config
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on a non-scalar node");
        v[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Leaf for parameter tensor `index`.
    pub fn param(&mut self, index: usize) -> NodeId {
        let value = self.params.tensors[index].clone();
        self.push(Op::Param(index), value)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    /// 1x1 constant.
    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.t().to_owned();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a].value - &self.nodes[b].value;
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a].value * &self.nodes[b].value;
        self.push(Op::MulElem(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a].value.mapv(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(softplus);
        self.push(Op::Softplus(a), value)
    }

    pub fn causal_softmax(&mut self, a: NodeId) -> NodeId {
        let value = causal_softmax(&self.nodes[a].value);
        self.push(Op::CausalSoftmax(a), value)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = log_softmax_rows(&self.nodes[a].value);
        self.push(Op::LogSoftmaxRows(a), value)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let src = &self.nodes[a].value;
        let mut value = Array2::zeros((indices.len(), src.ncols()));
        for (i, &row) in indices.iter().enumerate() {
            value.row_mut(i).assign(&src.row(row));
        }
        self.push(Op::GatherRows(a, indices), value)
    }

    pub fn vstack(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "vstack of nothing");
        let cols = self.nodes[parts[0]].value.ncols();
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.nrows()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in &parts {
            let v = &self.nodes[p].value;
            value.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        self.push(Op::VStack(parts), value)
    }

    pub fn hstack(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "hstack of nothing");
        let rows = self.nodes[parts[0]].value.nrows();
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in &parts {
            let v = &self.nodes[p].value;
            value.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(Op::HStack(parts), value)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.nodes[a].value.slice(s![start..end, ..]).to_owned();
        self.push(Op::SliceRows(a, start, end), value)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.nodes[a].value.slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), value)
    }

    pub fn pick_sum(&mut self, a: NodeId, positions: Vec<(usize, usize)>) -> NodeId {
        let src = &self.nodes[a].value;
        let sum: f64 = positions.iter().map(|&(r, c)| src[[r, c]]).sum();
        self.push(Op::PickSum(a, positions), Array2::from_elem((1, 1), sum))
    }

    /// Backpropagates from a 1x1 loss node, returning gradients for every
    /// parameter tensor (zeros for tensors the loss never touched).
    pub fn backward(&self, root: NodeId) -> Result<Gradients, ModelError> {
        let dim = self.nodes[root].value.dim();
        if dim != (1, 1) {
            return Err(ModelError::NonScalarRoot { rows: dim.0, cols: dim.1 });
        }

        let mut adjoint: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[root] = Some(Array2::from_elem((1, 1), 1.0));
        let mut grads = Gradients::zeros(&self.params.config);

        fn acc(slot: &mut Option<Array2<f64>>, delta: &Array2<f64>) {
            match slot {
                Some(existing) => *existing += delta,
                None => *slot = Some(delta.clone()),
            }
        }

        for id in (0..=root).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Param(index) => grads.tensors[*index] += &g,
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    acc(&mut adjoint[*a], &da);
                    acc(&mut adjoint[*b], &db);
                }
                Op::Transpose(a) => acc(&mut adjoint[*a], &g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut adjoint[*a], &g);
                    acc(&mut adjoint[*b], &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adjoint[*a], &g);
                    acc(&mut adjoint[*b], &g.mapv(|x| -x));
                }
                Op::MulElem(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    acc(&mut adjoint[*a], &da);
                    acc(&mut adjoint[*b], &db);
                }
                Op::Scale(a, factor) => acc(&mut adjoint[*a], &g.mapv(|x| x * factor)),
                Op::Sigmoid(a) => {
                    let s = &self.nodes[id].value;
                    let da = &g * &(s * &s.mapv(|x| 1.0 - x));
                    acc(&mut adjoint[*a], &da);
                }
                Op::Softplus(a) => {
                    let da = &g * &self.nodes[*a].value.mapv(sigmoid);
                    acc(&mut adjoint[*a], &da);
                }
                Op::CausalSoftmax(a) => {
                    // With p the masked row softmax: dx = p * (g - <g, p>_row).
                    // Masked entries have p = 0, so their dx is zero.
                    let p = &self.nodes[id].value;
                    let mut da = Array2::zeros(p.dim());
                    for i in 0..p.nrows() {
                        let dot: f64 = (0..p.ncols()).map(|j| g[[i, j]] * p[[i, j]]).sum();
                        for j in 0..p.ncols() {
                            da[[i, j]] = p[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(&mut adjoint[*a], &da);
                }
                Op::LogSoftmaxRows(a) => {
                    // y = x - logsumexp(x) per row; dx = g - softmax(x) * sum(g)_row.
                    let y = &self.nodes[id].value;
                    let mut da = g.clone();
                    for i in 0..y.nrows() {
                        let row_sum: f64 = (0..y.ncols()).map(|j| g[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] -= y[[i, j]].exp() * row_sum;
                        }
                    }
                    acc(&mut adjoint[*a], &da);
                }
                Op::GatherRows(a, indices) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.dim());
                    for (i, &row) in indices.iter().enumerate() {
                        let mut target = da.row_mut(row);
                        target += &g.row(i);
                    }
                    acc(&mut adjoint[*a], &da);
                }
                Op::VStack(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.nrows();
                        let slice = g.slice(s![at..at + rows, ..]).to_owned();
                        acc(&mut adjoint[p], &slice);
                        at += rows;
                    }
                }
                Op::HStack(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.ncols();
                        let slice = g.slice(s![.., at..at + cols]).to_owned();
                        acc(&mut adjoint[p], &slice);
                        at += cols;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.dim());
                    da.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut adjoint[*a], &da);
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.dim());
                    da.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut adjoint[*a], &da);
                }
                Op::PickSum(a, positions) => {
                    let scale = g[[0, 0]];
                    let mut da = Array2::zeros(self.nodes[*a].value.dim());
                    for &(r, c) in positions {
                        da[[r, c]] += scale;
                    }
                    acc(&mut adjoint[*a], &da);
                }
            }
        }
        Ok(grads)
    }
}

/// One coordinate inspected by [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FdCoord {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub coords: Vec<FdCoord>,
    pub max_rel_err: f64,
    pub loss: f64,
}

/// Compares analytic gradients against central finite differences at
/// `n_coords` randomly chosen parameter coordinates.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)` and every
/// coordinate must satisfy `rel_err < tol` (strictly — a tolerance of zero
/// can never pass). `build` must construct the same scalar loss for any
/// parameter values it is handed.
pub fn finite_diff_check<F>(
    params: &ModelParams,
    build: F,
    n_coords: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<FdReport, ModelError>
where
    F: Fn(&mut Graph<'_>) -> NodeId,
{
    let mut graph = Graph::new(params);
    let root = build(&mut graph);
    let loss = graph.scalar(root);
    let grads = graph.backward(root)?;

    let mut rng = rng_from(seed);
    let mut coords = Vec::with_capacity(n_coords);
    let mut max_rel_err = 0.0f64;
    for _ in 0..n_coords {
        let tensor = rng.gen_range(0..params.tensors.len());
        let index = rng.gen_range(0..params.tensors[tensor].len());

        let plus = params.perturbed(tensor, index, h);
        let mut graph_plus = Graph::new(&plus);
        let root_plus = build(&mut graph_plus);
        let f_plus = graph_plus.scalar(root_plus);

        let minus = params.perturbed(tensor, index, -h);
        let mut graph_minus = Graph::new(&minus);
        let root_minus = build(&mut graph_minus);
        let f_minus = graph_minus.scalar(root_minus);

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let analytic = grads.tensors[tensor].as_slice().expect("standard layout")[index];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        max_rel_err = max_rel_err.max(rel_err);
        if !(rel_err < tol) {
            let name = params.config.layout()[tensor].0.clone();
            return Err(ModelError::GradientCheck {
                tensor: name,
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
        coords.push(FdCoord { tensor, index, analytic, numeric, rel_err });
    }
    Ok(FdReport { coords, max_rel_err, loss })
}
