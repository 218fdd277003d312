//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! parents, so nodes are topologically ordered by construction. `backward`
//! walks the tape once in reverse.

use super::dense::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which dimension a reduction collapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: `r×c → 1×c`.
    Rows,
    /// Collapse columns: `r×c → r×1`.
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    Binary(Binary, Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    MeanStack(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    MeanAxis(Var, Axis),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Square(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    PairwiseSqDist(Var),
    MaskedLogSumExpRows(Var, Vec<bool>),
    /// Attention weights of every head, `heads × rq × rk`, kept for backward.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<f64>,
    },
    /// Per-row `1/√(var+eps)`.
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    /// Some trainable leaf is upstream of this node.
    needs_grad: bool,
}

/// A recording of primitive operations (the tape).
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    strict: bool,
}

/// Gradients of a scalar output with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; zeros when `var` is not on any path to the output.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that rejects any non-finite intermediate value.
    pub fn strict() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
        }
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

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "node {} ({:?}) produced a non-finite value",
                self.nodes.len(),
                op_name(&op)
            )));
        }
        let needs_grad = inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        let (r, c) = t.dims();
        let t = if t.shape().len() == 2 {
            t
        } else {
            t.reshape(r, c).expect("dims are consistent")
        };
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { trainable },
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Registers a leaf that never receives gradient updates.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { trainable: true })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let bcast = if (ar, ac) == (br, bc) {
            Broadcast::Same
        } else if (br, bc) == (1, 1) {
            Broadcast::Scalar
        } else if br == 1 && bc == ac {
            Broadcast::Row
        } else if bc == 1 && br == ar {
            Broadcast::Col
        } else {
            return Err(Error::Shape {
                op: binary_name(kind),
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(ar * ac);
        for i in 0..ar {
            for j in 0..ac {
                let x = av[i * ac + j];
                let y = bv[broadcast_index(bcast, i, j, ac)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let t = Tensor::matrix(ar, ac, out)?;
        self.push(t, Op::Binary(kind, a, b, bcast))
    }

    /// Elementwise `a + b`; `b` may be a row vector, column vector or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(first(parts)?).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, data)?;
        self.push(t, Op::ConcatRows(parts.to_vec()))
    }

    /// Stacks matrices horizontally.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(first(parts)?).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(rows, cols, data)?;
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        self.push(t, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let t = Tensor::matrix(r, len, data)?;
        self.push(t, Op::SliceCols(a, start))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshape(rows, cols)?;
        self.push(t, Op::Reshape(a))
    }

    /// Elementwise mean of equally shaped tensors, summed in order and then
    /// divided, followed by one residual correction so that averaging
    /// identical inputs reproduces them exactly.
    pub fn mean_stack(&mut self, parts: &[Var]) -> Result<Var> {
        let (r, c) = self.dims(first(parts)?);
        for &p in parts {
            if self.dims(p) != (r, c) {
                return Err(Error::Shape {
                    op: "mean_stack",
                    lhs: vec![r, c],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let n = parts.len() as f64;
        let mut mean = vec![0.0; r * c];
        for &p in parts {
            for (m, v) in mean.iter_mut().zip(self.value(p).data()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut residual = vec![0.0; r * c];
        for &p in parts {
            for ((res, v), m) in residual.iter_mut().zip(self.value(p).data()).zip(&mean) {
                *res += v - m;
            }
        }
        for (m, res) in mean.iter_mut().zip(residual) {
            *m += res / n;
        }
        let t = Tensor::matrix(r, c, mean)?;
        self.push(t, Op::MeanStack(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum() / t.len().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    fn reduce_axis(&self, a: Var, axis: Axis) -> Tensor {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(v.row(i)) {
                        *o += x;
                    }
                }
                Tensor::matrix(1, c, out).expect("row reduction")
            }
            Axis::Cols => {
                let out = (0..r).map(|i| v.row(i).iter().sum()).collect();
                Tensor::matrix(r, 1, out).expect("column reduction")
            }
        }
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.reduce_axis(a, axis);
        self.push(t, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.dims(a);
        let n = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        } as f64;
        let t = self.reduce_axis(a, axis).map(|v| v / n);
        self.push(t, Op::MeanAxis(a, axis))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v * v);
        self.push(t, Op::Square(a))
    }

    /// Elementwise square root. The derivative at exactly zero is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = softmax_rows(self.value(a));
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = v.row(i);
            let lse = logsumexp(row.iter().copied());
            out.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push(t, Op::LogSoftmaxRows(a))
    }

    /// Squared Euclidean distance between every pair of rows: `n×m → n×n`.
    /// Computed from explicit differences so identical rows give exactly 0.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.rows();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = v
                    .row(i)
                    .iter()
                    .zip(v.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let t = Tensor::matrix(n, n, out)?;
        self.push(t, Op::PairwiseSqDist(a))
    }

    /// Per-row log-sum-exp over the entries selected by `mask` (`r×c → r×1`).
    /// Rows with no selected entry yield 0 and pass no gradient.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims();
        if mask.len() != r * c {
            return Err(Error::Shape {
                op: "masked_logsumexp_rows",
                lhs: vec![r, c],
                rhs: vec![mask.len()],
            });
        }
        let out = (0..r)
            .map(|i| {
                let sel = v
                    .row(i)
                    .iter()
                    .zip(&mask[i * c..(i + 1) * c])
                    .filter(|(_, &m)| m)
                    .map(|(&x, _)| x);
                masked_lse(sel)
            })
            .collect();
        let t = Tensor::matrix(r, 1, out)?;
        self.push(t, Op::MaskedLogSumExpRows(a, mask))
    }

    /// Fused multi-head attention: for each of `heads` column blocks,
    /// `softmax(Q_h K_hᵀ/√(d/heads)) V_h`, concatenated. Equivalent to the
    /// composed primitives, with one tape node instead of dozens.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (rq, d) = self.dims(q);
        let (rk, dk) = self.dims(k);
        let (rv, dv) = self.dims(v);
        if dk != d || dv != d || rv != rk || heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![rq, d, heads],
                rhs: vec![rk, dk, rv, dv],
            });
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![0.0; heads * rq * rk];
        let mut out = vec![0.0; rq * d];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..rq {
                let w = &mut weights[(h * rq + i) * rk..(h * rq + i + 1) * rk];
                let qi = &qv[i * d + off..i * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for (j, wj) in w.iter_mut().enumerate() {
                    let kj = &kv[j * d + off..j * d + off + hd];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    *wj = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    z += *wj;
                }
                let o = &mut out[i * d + off..i * d + off + hd];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj /= z;
                    let vj = &vv[j * d + off..j * d + off + hd];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += *wj * vc;
                    }
                }
            }
        }
        let t = Tensor::matrix(rq, d, out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
        )
    }

    /// Row standardization `(x − mean)/√(var + eps)` with the biased
    /// variance; gain and bias are applied separately.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims();
        let mut out = Vec::with_capacity(r * c);
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * s));
            inv.push(s);
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push(t, Op::LayerNorm(a, inv))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| 0.5 * x * (1.0 + gelu_inner(x).tanh()));
        self.push(t, Op::Gelu(a))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.dims()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a).data();
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bt = self.value(*b).transpose();
                    let mut da = vec![0.0; m * k];
                    matmul_into(gd, bt.data(), &mut da, m, n, k);
                    accumulate(grads, *a, m, k, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gr = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (o, y) in db[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += x * y;
                            }
                        }
                    }
                    accumulate(grads, *b, k, n, db);
                }
            }
            Op::Binary(kind @ (Binary::Add | Binary::Sub), a, b, Broadcast::Same) => {
                let (r, c) = node.value.dims();
                if self.needs(*a) {
                    accumulate(grads, *a, r, c, gd.to_vec());
                }
                if self.needs(*b) {
                    let db = if *kind == Binary::Add {
                        gd.to_vec()
                    } else {
                        gd.iter().map(|v| -v).collect()
                    };
                    accumulate(grads, *b, r, c, db);
                }
            }
            Op::Binary(kind, a, b, bcast) => {
                let av = self.value(*a).data();
                let bvt = self.value(*b);
                let bv = bvt.data();
                let (r, c) = node.value.dims();
                let (br, bc) = bvt.dims();
                let mut da = vec![0.0; r * c];
                let mut db = vec![0.0; br * bc];
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        let bi = broadcast_index(*bcast, i, j, c);
                        let (x, y, gk) = (av[k], bv[bi], gd[k]);
                        let (ga, gb) = match kind {
                            Binary::Add => (gk, gk),
                            Binary::Sub => (gk, -gk),
                            Binary::Mul => (gk * y, gk * x),
                            Binary::Div => (gk / y, -gk * x / (y * y)),
                        };
                        da[k] += ga;
                        db[bi] += gb;
                    }
                }
                accumulate(grads, *a, r, c, da);
                accumulate(grads, *b, br, bc, db);
            }
            Op::Scale(a, s) => {
                let (r, c) = node.value.dims();
                accumulate(grads, *a, r, c, gd.iter().map(|v| v * s).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let (r, c) = self.dims(*a);
                accumulate(grads, *a, r, c, gd.to_vec());
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                accumulate(grads, *a, r, c, g.transpose().into_data());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    accumulate(grads, p, r, c, gd[offset..offset + r * c].to_vec());
                    offset += r * c;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    let mut dp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        dp.extend_from_slice(&gd[i * total + col..i * total + col + c]);
                    }
                    accumulate(grads, p, r, c, dp);
                    col += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.dims(*a);
                let mut da = vec![0.0; r * c];
                da[start * c..start * c + gd.len()].copy_from_slice(gd);
                accumulate(grads, *a, r, c, da);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let len = node.value.cols();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                accumulate(grads, *a, r, c, da);
            }
            Op::MeanStack(parts) => {
                let (r, c) = node.value.dims();
                let n = parts.len() as f64;
                for &p in parts {
                    accumulate(grads, p, r, c, gd.iter().map(|v| v / n).collect());
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.dims(*a);
                accumulate(grads, *a, r, c, vec![gd[0]; r * c]);
            }
            Op::Mean(a) => {
                let (r, c) = self.dims(*a);
                let v = gd[0] / (r * c).max(1) as f64;
                accumulate(grads, *a, r, c, vec![v; r * c]);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (r, c) = self.dims(*a);
                let scale = match (&node.op, axis) {
                    (Op::MeanAxis(..), Axis::Rows) => 1.0 / r as f64,
                    (Op::MeanAxis(..), Axis::Cols) => 1.0 / c as f64,
                    _ => 1.0,
                };
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let gv = match axis {
                            Axis::Rows => gd[j],
                            Axis::Cols => gd[i],
                        };
                        da.push(gv * scale);
                    }
                }
                accumulate(grads, *a, r, c, da);
            }
            Op::Exp(a) => {
                let (r, c) = self.dims(*a);
                let y = node.value.data();
                accumulate(grads, *a, r, c, zip_map(gd, y, |g, y| g * y));
            }
            Op::Log(a) => {
                let (r, c) = self.dims(*a);
                let x = self.value(*a).data();
                accumulate(grads, *a, r, c, zip_map(gd, x, |g, x| g / x));
            }
            Op::Tanh(a) => {
                let (r, c) = self.dims(*a);
                let y = node.value.data();
                accumulate(grads, *a, r, c, zip_map(gd, y, |g, y| g * (1.0 - y * y)));
            }
            Op::Square(a) => {
                let (r, c) = self.dims(*a);
                let x = self.value(*a).data();
                accumulate(grads, *a, r, c, zip_map(gd, x, |g, x| 2.0 * g * x));
            }
            Op::Sqrt(a) => {
                let (r, c) = self.dims(*a);
                let y = node.value.data();
                let da = zip_map(gd, y, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 });
                accumulate(grads, *a, r, c, da);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = self.dims(*a);
                let y = node.value.data();
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    da.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                accumulate(grads, *a, r, c, da);
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = self.dims(*a);
                let y = node.value.data();
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    da.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * gsum));
                }
                accumulate(grads, *a, r, c, da);
            }
            Op::PairwiseSqDist(a) => {
                let v = self.value(*a);
                let (n, m) = v.dims();
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..n {
                        let w = gd[i * n + j];
                        if i == j || w == 0.0 {
                            continue;
                        }
                        for k in 0..m {
                            let diff = 2.0 * w * (v.get(i, k) - v.get(j, k));
                            da[i * m + k] += diff;
                            da[j * m + k] -= diff;
                        }
                    }
                }
                accumulate(grads, *a, n, m, da);
            }
            Op::MaskedLogSumExpRows(a, mask) => {
                let v = self.value(*a);
                let (r, c) = v.dims();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let row_mask = &mask[i * c..(i + 1) * c];
                    if !row_mask.iter().any(|&m| m) {
                        continue;
                    }
                    let lse = node.value.data()[i];
                    for j in 0..c {
                        if row_mask[j] {
                            da[i * c + j] = gd[i] * (v.get(i, j) - lse).exp();
                        }
                    }
                }
                accumulate(grads, *a, r, c, da);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (rq, d) = self.dims(*q);
                let rk = self.dims(*k).0;
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = vec![0.0; rq * d];
                let mut dk = vec![0.0; rk * d];
                let mut dv = vec![0.0; rk * d];
                let mut da = vec![0.0; rk];
                for h in 0..*heads {
                    let off = h * hd;
                    for i in 0..rq {
                        let w = &weights[(h * rq + i) * rk..(h * rq + i + 1) * rk];
                        let go = &gd[i * d + off..i * d + off + hd];
                        // dA_ij = dO_i · V_j ; dV_j += A_ij dO_i
                        let mut dot = 0.0;
                        for j in 0..rk {
                            let vj = &vv[j * d + off..j * d + off + hd];
                            da[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += da[j] * w[j];
                            let dvj = &mut dv[j * d + off..j * d + off + hd];
                            for (x, g) in dvj.iter_mut().zip(go) {
                                *x += w[j] * g;
                            }
                        }
                        for j in 0..rk {
                            let ds = w[j] * (da[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in off..off + hd {
                                dq[i * d + c] += ds * kv[j * d + c];
                                dk[j * d + c] += ds * qv[i * d + c];
                            }
                        }
                    }
                }
                for (var, rows, data) in [(*q, rq, dq), (*k, rk, dk), (*v, rk, dv)] {
                    if self.needs(var) {
                        accumulate(grads, var, rows, d, data);
                    }
                }
            }
            Op::LayerNorm(a, inv) => {
                let (r, c) = self.dims(*a);
                let y = node.value.data();
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    da.extend(gr.iter().zip(yr).map(|(g, y)| inv[i] * (g - mg - y * mgy)));
                }
                accumulate(grads, *a, r, c, da);
            }
            Op::Gelu(a) => {
                let (r, c) = self.dims(*a);
                let x = self.value(*a).data();
                let da = zip_map(gd, x, |g, x| {
                    let t = gelu_inner(x).tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                accumulate(grads, *a, r, c, da);
            }
        }
    }
}

const GELU_A: f64 = 0.044_715;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + GELU_A * x * x * x)
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => Vec::new(),
        Op::MatMul(a, b) | Op::Binary(_, a, b, _) => vec![*a, *b],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::ConcatRows(p) | Op::ConcatCols(p) | Op::MeanStack(p) => p.clone(),
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::Reshape(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumAxis(a, _)
        | Op::MeanAxis(a, _)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Tanh(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::PairwiseSqDist(a)
        | Op::MaskedLogSumExpRows(a, _)
        | Op::LayerNorm(a, _)
        | Op::Gelu(a) => vec![*a],
    }
}

fn first(parts: &[Var]) -> Result<Var> {
    parts
        .first()
        .copied()
        .ok_or_else(|| Error::contract("concatenation of zero tensors"))
}

fn broadcast_index(b: Broadcast, i: usize, j: usize, cols: usize) -> usize {
    match b {
        Broadcast::Same => i * cols + j,
        Broadcast::Row => j,
        Broadcast::Col => i,
        Broadcast::Scalar => 0,
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, r: usize, c: usize, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::matrix(r, c, delta).expect("gradient shape"));
        }
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn masked_lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    if xs.clone().next().is_none() {
        0.0
    } else {
        logsumexp(xs)
    }
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|x| (x - max).exp()));
        let z: f64 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    Tensor::matrix(r, c, out).expect("softmax shape")
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Binary(k, ..) => binary_name(*k),
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Transpose(..) => "transpose",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Reshape(..) => "reshape",
        Op::MeanStack(..) => "mean_stack",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumAxis(..) => "sum_axis",
        Op::MeanAxis(..) => "mean_axis",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Tanh(..) => "tanh",
        Op::Square(..) => "square",
        Op::Sqrt(..) => "sqrt",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
        Op::PairwiseSqDist(..) => "pairwise_sq_dist",
        Op::MaskedLogSumExpRows(..) => "masked_logsumexp_rows",
        Op::Attention { .. } => "attention",
        Op::LayerNorm(..) => "layer_norm",
        Op::Gelu(..) => "gelu",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(row(&[1.0, -2.0, 3.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn inner_product_gradient() {
        // f = xᵀx at x = [1, 2] -> 2x
        let mut g = Graph::new();
        let x = g.param(row(&[1.0, 2.0]));
        let xt = g.transpose(x).unwrap();
        let f = g.matmul(x, xt).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(row(&[1.0, 2.0]));
        let y = g.param(row(&[5.0, 6.0, 7.0]));
        let f = g.sum(x).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(y), Tensor::zeros(1, 3));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_small_product() {
        let mut g = Graph::new();
        let a = g.constant(row(&[1.0, 2.0]));
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn zero_matrix_annihilates() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::zeros(2, 2));
    }

    #[test]
    fn softmax_examples() {
        let uniform = softmax_rows(&row(&[0.0, 0.0, 0.0]));
        for v in uniform.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax_rows(&row(&[1000.0, 1000.0])).data(), &[0.5, 0.5]);
        let skew = softmax_rows(&row(&[0.0, 3f64.ln()]));
        assert!((skew.data()[0] - 0.25).abs() < 1e-15);
        assert!((skew.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mean_stack_of_identical_inputs_is_exact() {
        let mut g = Graph::new();
        let x = g.param(row(&[0.1, 1.0 / 3.0, 7.7, -2.9e-3]));
        for n in 1..12 {
            let parts = vec![x; n];
            let m = g.mean_stack(&parts).unwrap();
            assert_eq!(g.value(m), g.value(x), "n = {n}");
        }
    }

    #[test]
    fn strict_mode_rejects_nan() {
        let mut g = Graph::strict();
        let x = g.constant(row(&[-1.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn broadcast_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(3, 2));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn masked_lse_empty_row_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = g
            .masked_logsumexp_rows(x, vec![false, false, true, true])
            .unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let expected = 4.0 + (1.0 + (-1f64).exp()).ln();
        assert!((g.value(l).data()[1] - expected).abs() < 1e-14);
    }

    fn filled(r: usize, c: usize, seed: f64) -> Tensor {
        let data = (0..r * c).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    /// Gradients of `sum(out ⊙ W)` for a fixed weighting `W`, per input.
    fn weighted_grads(
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        inputs: &[Tensor],
    ) -> (Tensor, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let (r, c) = g.value(out).dims();
        let w = g.constant(filled(r, c, 0.37));
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(out).clone(), vars.iter().map(|v| grads.get(*v)).collect())
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(b) < tol, "diff {}", a.max_abs_diff(b));
    }

    #[test]
    fn fused_attention_matches_composed_primitives() {
        let (rq, rk, d, heads) = (3, 5, 8, 4);
        let inputs = [filled(rq, d, 0.7), filled(rk, d, 1.3), filled(rk, d, 2.1)];
        let fused = weighted_grads(|g, v| g.attention(v[0], v[1], v[2], heads).unwrap(), &inputs);
        let composed = weighted_grads(
            |g, v| {
                let hd = d / heads;
                let outs: Vec<Var> = (0..heads)
                    .map(|h| {
                        let q = g.slice_cols(v[0], h * hd, hd).unwrap();
                        let k = g.slice_cols(v[1], h * hd, hd).unwrap();
                        let vv = g.slice_cols(v[2], h * hd, hd).unwrap();
                        let kt = g.transpose(k).unwrap();
                        let s = g.matmul(q, kt).unwrap();
                        let s = g.scale(s, 1.0 / (hd as f64).sqrt()).unwrap();
                        let a = g.softmax_rows(s).unwrap();
                        g.matmul(a, vv).unwrap()
                    })
                    .collect();
                g.concat_cols(&outs).unwrap()
            },
            &inputs,
        );
        assert_close(&fused.0, &composed.0, 1e-13);
        for (a, b) in fused.1.iter().zip(&composed.1) {
            assert_close(a, b, 1e-12);
        }
    }

    #[test]
    fn fused_layer_norm_matches_composed_primitives() {
        let inputs = [filled(4, 6, 0.9)];
        let fused = weighted_grads(|g, v| g.layer_norm_rows(v[0], 1e-5).unwrap(), &inputs);
        let composed = weighted_grads(
            |g, v| {
                let m = g.mean_axis(v[0], Axis::Cols).unwrap();
                let c = g.sub(v[0], m).unwrap();
                let sq = g.square(c).unwrap();
                let var = g.mean_axis(sq, Axis::Cols).unwrap();
                let var = g.add_scalar(var, 1e-5).unwrap();
                let sd = g.sqrt(var).unwrap();
                g.div(c, sd).unwrap()
            },
            &inputs,
        );
        assert_close(&fused.0, &composed.0, 1e-13);
        assert_close(&fused.1[0], &composed.1[0], 1e-12);
    }

    #[test]
    fn fused_gelu_matches_composed_primitives() {
        let inputs = [filled(3, 7, 3.3).map(|x| 3.0 * x)];
        let fused = weighted_grads(|g, v| g.gelu(v[0]).unwrap(), &inputs);
        let composed = weighted_grads(
            |g, v| {
                let x = v[0];
                let sq = g.square(x).unwrap();
                let cube = g.mul(sq, x).unwrap();
                let cube = g.scale(cube, 0.044_715).unwrap();
                let inner = g.add(x, cube).unwrap();
                let inner = g.scale(inner, (2.0 / std::f64::consts::PI).sqrt()).unwrap();
                let t = g.tanh(inner).unwrap();
                let t = g.add_scalar(t, 1.0).unwrap();
                let half = g.scale(x, 0.5).unwrap();
                g.mul(half, t).unwrap()
            },
            &inputs,
        );
        assert_close(&fused.0, &composed.0, 1e-14);
        assert_close(&fused.1[0], &composed.1[0], 1e-13);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(2, 6));
        let k = g.constant(Tensor::zeros(3, 6));
        assert!(matches!(g.attention(q, k, k, 4), Err(Error::Shape { .. })));
    }
}
