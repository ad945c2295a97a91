//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a
//! node holding its forward value and the indices of its parents, so node
//! order is a topological order and the backward pass is a single reverse
//! sweep. Graphs are built per training step and dropped afterwards.

use super::special::{digamma_unchecked, lgamma_unchecked};
use super::tensor::{axpy, Tensor};
use crate::error::{Error, Result};

/// Arguments below this are clamped by `log` and `lgamma`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    MatMulNT,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Tanh,
    Relu,
    Exp,
    Log,
    Lgamma,
    Softmax,
    LogSoftmax,
    CausalSoftmax,
    LayerNorm,
    Sum,
    Mean,
    RowSum,
    SliceCols,
    ConcatCols,
    ConcatRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNT => "matmul_nt",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Sub => "sub",
            OpKind::Mul => "hadamard",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Lgamma => "lgamma",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::CausalSoftmax => "causal_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::RowSum => "row_sum",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|op| op.name() == name)
    }
}

pub const ALL_OPS: [OpKind; 25] = [
    OpKind::Leaf,
    OpKind::Constant,
    OpKind::MatMul,
    OpKind::MatMulNT,
    OpKind::Add,
    OpKind::AddRow,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Tanh,
    OpKind::Relu,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Lgamma,
    OpKind::Softmax,
    OpKind::LogSoftmax,
    OpKind::CausalSoftmax,
    OpKind::LayerNorm,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::RowSum,
    OpKind::SliceCols,
    OpKind::ConcatCols,
    OpKind::ConcatRows,
];

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Lgamma(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CausalSoftmax(Var),
    /// x, gain, bias; aux holds the normalized input followed by per-row 1/std.
    LayerNorm(Var, Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Lgamma(..) => OpKind::Lgamma,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::CausalSoftmax(..) => OpKind::CausalSoftmax,
            Op::LayerNorm(..) => OpKind::LayerNorm,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::RowSum(..) => OpKind::RowSum,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    aux: Vec<f64>,
}

/// Arena of computation nodes for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamp_events: u64,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Makes the backward rule of `op` deliberately wrong (scaled by 1.1).
    /// Used to check that the gradient checker catches broken derivatives.
    pub fn inject_fault(&mut self, op: OpKind) {
        self.fault = Some(op);
    }

    /// Number of times `log`/`lgamma` clamped an argument up to [`LOG_CLAMP`].
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, aux: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A differentiable leaf (model parameter or input under test).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push_op(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push_op(v, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1, "add_row expects a single-row bias");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), bv.cols(), "add_row width mismatch");
        let bias = bv.data().to_vec();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += y;
            }
        }
        self.push_op(v, Op::AddRow(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push_op(v, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push_op(v, Op::Exp(a), &[a])
    }

    /// Natural log with the argument clamped at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Var {
        let mut clamped = 0;
        let v = self.value(a).map(|x| {
            if x < LOG_CLAMP {
                clamped += 1;
            }
            x.max(LOG_CLAMP).ln()
        });
        self.clamp_events += clamped;
        self.push_op(v, Op::Log(a), &[a])
    }

    /// Elementwise ln Γ, argument clamped at [`LOG_CLAMP`].
    pub fn lgamma(&mut self, a: Var) -> Var {
        let mut clamped = 0;
        let v = self.value(a).map(|x| {
            if x < LOG_CLAMP || x.is_nan() {
                clamped += 1;
            }
            lgamma_unchecked(if x.is_nan() { x } else { x.max(LOG_CLAMP) })
        });
        self.clamp_events += clamped;
        self.push_op(v, Op::Lgamma(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push_op(v, Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push_op(v, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; the rest
    /// are exactly zero. Needs at least as many columns as rows.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let (r, c) = v.dims2();
        assert!(r <= c, "causal_softmax needs rows <= cols, got {r}x{c}");
        for i in 0..r {
            let row = v.row_mut(i);
            softmax_in_place(&mut row[..=i]);
            for x in &mut row[i + 1..] {
                *x = 0.0;
            }
        }
        self.push_op(v, Op::CausalSoftmax(a), &[a])
    }

    /// Row-wise layer normalization with learned `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        assert_eq!(g.len(), c, "layer_norm gain width");
        assert_eq!(b.len(), c, "layer_norm bias width");
        let mut out = vec![0.0; r * c];
        let mut aux = vec![0.0; r * c + r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            aux[r * c + i] = inv_std;
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                aux[i * c + j] = xhat;
                out[i * c + j] = xhat * g[j] + b[j];
            }
        }
        let v = self.push_op(Tensor::matrix(r, c, out), Op::LayerNorm(x, gain, bias), &[x, gain, bias]);
        self.nodes[v.0].aux = aux;
        v
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_op(v, Op::Mean(a), &[a])
    }

    /// `r x c -> r x 1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let sums: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let v = Tensor::matrix(sums.len(), 1, sums);
        self.push_op(v, Op::RowSum(a), &[a])
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        assert!(start + width <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + width]);
        }
        self.push_op(Tensor::matrix(r, width, out), Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), r, "concat_cols row mismatch");
                out.extend_from_slice(t.row(i));
            }
        }
        self.push_op(Tensor::matrix(r, total, out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push_op(Tensor::matrix(rows, c, out), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar root, got shape {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(rv.shape().to_vec(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                g.scale_assign(1.1);
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => t.add_assign(&delta),
                None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                if self.wants(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    let c = g.cols();
                    let mut col = vec![0.0; c];
                    for i in 0..g.rows() {
                        axpy(1.0, g.row(i), &mut col);
                    }
                    acc(*b, Tensor::matrix(1, c, col));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |x, inp| if inp > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, inp| if inp < LOG_CLAMP { 0.0 } else { x / inp })),
            Op::Lgamma(a) => acc(
                *a,
                g.zip_map(self.value(*a), |x, inp| if inp < LOG_CLAMP { 0.0 } else { x * digamma_unchecked(inp) }),
            ),
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                // dx_j = y_j (g_j - Σ_k g_k y_k); masked entries have y = 0.
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (yy, gg)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yy * (gg - s);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                // dx_j = g_j - softmax_j Σ_k g_k
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for i in 0..y.rows() {
                    let s: f64 = g.row(i).iter().sum();
                    for (d, (yy, gg)) in dx.row_mut(i).iter_mut().zip(y.row(i).iter().zip(g.row(i))) {
                        *d = gg - yy.exp() * s;
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm(x, gain, bias) => {
                let (r, c) = node.value.dims2();
                let xhat = &node.aux[..r * c];
                let inv_std = &node.aux[r * c..];
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = g.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xh = 0.0;
                        for j in 0..c {
                            let dy = gr[j] * gv[j];
                            mean_dy += dy;
                            mean_dy_xh += dy * xh[j];
                        }
                        mean_dy /= c as f64;
                        mean_dy_xh /= c as f64;
                        for j in 0..c {
                            let dy = gr[j] * gv[j];
                            dx[i * c + j] = inv_std[i] * (dy - mean_dy - xh[j] * mean_dy_xh);
                        }
                    }
                    acc(*x, Tensor::matrix(r, c, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g.get(i, j) * xhat[i * c + j];
                        }
                    }
                    acc(*gain, Tensor::matrix(1, c, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        axpy(1.0, g.row(i), &mut db);
                    }
                    acc(*bias, Tensor::matrix(1, c, db));
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::filled(self.value(*a).shape().to_vec(), s));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let s = g.item() / t.len() as f64;
                acc(*a, Tensor::filled(t.shape().to_vec(), s));
            }
            Op::RowSum(a) => {
                let (r, c) = self.value(*a).dims2();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    d.extend(std::iter::repeat_n(g.get(i, 0), c));
                }
                acc(*a, Tensor::matrix(r, c, d));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).dims2();
                let w = g.cols();
                let mut d = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    d.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = self.value(p).dims2();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        acc(p, Tensor::matrix(r, w, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.wants(p) {
                        acc(p, Tensor::matrix(r, c, g.data()[offset * c..(offset + r) * c].to_vec()));
                    }
                    offset += r;
                }
            }
        }
    }
}

/// Max-subtracted softmax of a slice, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Softmax of a finite vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if let Some(x) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("softmax requires finite logits, got {x}")));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}
