//! Reverse-mode differentiation over a recorded computation.
//!
//! Every operation appends a node holding its forward value and the
//! information its backward rule needs. Nodes are only ever appended, so
//! index order is a topological order and the backward sweep simply walks
//! the record in reverse, visiting each node once.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamFilter, ParamStore};
use crate::tensor::{self, axis_layout, gemm, layer_norm_core, pool_layout, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    GeluLike(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    ColNormalize { x: Var, denom: Vec<f32> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Gather { x: Var, rows: Vec<usize> },
    Concat(Vec<Var>),
    Reshape(Var),
    AvgPool { x: Var, stride: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    trainable: ParamFilter,
    no_grad: bool,
}

impl Graph {
    /// A graph in which every bound parameter is trainable.
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in which only parameters accepted by `trainable` receive gradients.
    pub fn with_trainable(trainable: ParamFilter) -> Self {
        Self {
            trainable,
            ..Self::default()
        }
    }

    /// A graph that records values only; `backward` finds nothing to do.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            trainable: ParamFilter::None,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter; repeated calls return the same node so shared
    /// weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let trainable = self.trainable.accepts(name);
        let v = self.leaf(value, trainable);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.dims()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of every bound trainable parameter, in binding order.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.param_order
            .iter()
            .filter_map(|name| {
                let v = self.params[name];
                self.requires_grad(v).then(|| (name.clone(), self.grad(v)))
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = !self.no_grad && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f32) -> f32) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.dims().to_vec(), data)?;
        self.push(t, op, &[x], name)
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        self.same_dims(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.dims().to_vec(), data)?;
        self.push(t, op, &[a, b], name)
    }

    /// `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    /// `a^T @ b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, true, b, false)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let t = tensor::matmul_ex(self.value(a), ta, self.value(b), tb)?;
        self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`C` vector to every row of an `R x C` view.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if self.value(row).numel() != cols {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", self.dims(x), self.dims(row)),
            ));
        }
        let r = self.value(row).data();
        let src = self.value(x);
        let data = src
            .data()
            .chunks(cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(src.dims().to_vec(), data)?;
        self.push(t, Op::AddRow(x, row), &[x, row], "add_row")
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.map(x, Op::Scale(x, s), "scale", move |v| v * s)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), "tanh", f32::tanh)
    }

    /// `x * sigmoid(1.702 x)`.
    pub fn gelu_like(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::GeluLike(x), "gelu_like", |v| v * sigmoid(GELU_K * v))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = tensor::softmax_axis(self.value(x), axis)?;
        self.push(t, Op::Softmax { x, axis }, &[x], "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let out = tensor::layer_norm(xv, gv, bv)?;
        let op = if self.no_grad {
            Op::Leaf
        } else {
            let d = *xv.dims().last().unwrap_or(&1);
            let (xhat, rstd) = layer_norm_core(xv, d);
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            }
        };
        self.push(out, op, &[x, gain, bias], "layer_norm")
    }

    /// Divides each column of a matrix by its sum plus `eps`.
    pub fn col_normalize(&mut self, x: Var, eps: f32) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 {
            return Err(shape_err("col_normalize", format!("{:?}", src.dims())));
        }
        let (r, c) = (src.dims()[0], src.dims()[1]);
        let mut denom = vec![eps; c];
        for i in 0..r {
            for (d, v) in denom.iter_mut().zip(src.row(i)) {
                *d += v;
            }
        }
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            for (v, d) in row.iter_mut().zip(&denom) {
                *v /= d;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        self.push(t, Op::ColNormalize { x, denom }, &[x], "col_normalize")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f32>() / t.numel().max(1) as f32;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Mean over the leading axis: `[R, C] -> [1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.rows_cols();
        if r == 0 {
            return Err(shape_err("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), &[x], "mean_rows")
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_dims("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = p.numel().max(1) as f32;
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            / n;
        self.push(Tensor::scalar(s), Op::Mse(pred, target), &[pred, target], "mse")
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dims()[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} vs {} labels", lv.dims(), labels.len()),
            ));
        }
        let c = lv.dims()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err("cross_entropy", format!("label {bad} >= {c} classes")));
        }
        let probs = tensor::softmax_axis(lv, 1)?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs.get2(i, l).max(f32::MIN_POSITIVE).ln())
            .sum::<f32>()
            / labels.len().max(1) as f32;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs: probs.into_data(),
        };
        self.push(Tensor::scalar(loss), op, &[logits], "cross_entropy")
    }

    /// Selects rows (leading-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.rows_cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(src.row(i));
        }
        let mut dims = src.dims().to_vec();
        dims[0] = rows.len();
        let t = Tensor::new(dims, out)?;
        let op = Op::Gather {
            x,
            rows: rows.to_vec(),
        };
        self.push(t, op, &[x], "gather_rows")
    }

    /// Contiguous rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let tail = self.dims(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.dims()[1..] != tail[..] {
                return Err(shape_err(
                    "concat_rows",
                    format!("{:?} vs {:?}", t.dims(), self.dims(first)),
                ));
            }
            rows += t.dims()[0];
            out.extend_from_slice(t.data());
        }
        let mut dims = vec![rows];
        dims.extend(tail);
        let t = Tensor::new(dims, out)?;
        self.push(t, Op::Concat(parts.to_vec()), parts, "concat_rows")
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(dims)?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    pub fn avg_pool_grid(&mut self, x: Var, stride: usize) -> Result<Var> {
        let t = tensor::avg_pool_grid(self.value(x), stride)?;
        self.push(t, Op::AvgPool { x, stride }, &[x], "avg_pool_grid")
    }

    /// Propagates `d root / d node` into every reachable leaf that requires a
    /// gradient. Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let dims = self.dims(root).to_vec();
        if dims.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(dims));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.dims().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (node.value.dims()[0], node.value.dims()[1]);
                let k = if *ta { av.dims()[0] } else { av.dims()[1] };
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, av.numel());
                    if *ta {
                        // A is stored k x m: dA = op(B) dC^T.
                        gemm(k, n, m, bv.data(), *tb, g, true, ga, 1.0);
                    } else {
                        gemm(m, n, k, g, false, bv.data(), !*tb, ga, 1.0);
                    }
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, bv.numel());
                    if *tb {
                        // B is stored n x k: dB = dC^T op(A).
                        gemm(n, m, k, g, true, av.data(), *ta, gb, 1.0);
                    } else {
                        gemm(k, m, n, av.data(), !*ta, g, false, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, |gx| axpy(gx, g, 1.0));
                let c = self.value(*row).numel();
                self.acc(grads, *row, |gr| {
                    for chunk in g.chunks(c.max(1)) {
                        axpy(gr, chunk, 1.0);
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |gx| axpy(gx, g, *s)),
            Op::Sigmoid(x) => self.acc(grads, *x, |gx| {
                for ((o, gi), y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gi * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => self.acc(grads, *x, |gx| {
                for ((o, gi), y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gi * (1.0 - y * y);
                }
            }),
            Op::GeluLike(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(GELU_K * v);
                        *o += gi * (s + GELU_K * v * s * (1.0 - s));
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(node.value.dims(), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let dot: f32 = (0..len)
                                .map(|a| g[base + a * inner] * out[base + a * inner])
                                .sum();
                            for a in 0..len {
                                let idx = base + a * inner;
                                gx[idx] += out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                self.acc(grads, *gain, |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, a), b) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += a * b;
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for gr in g.chunks(d) {
                        axpy(gb, gr, 1.0);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let mut gxhat = vec![0.0; d];
                    for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for ((h, a), w) in gxhat.iter_mut().zip(gr).zip(gv) {
                            *h = a * w;
                        }
                        let mean_g = gxhat.iter().sum::<f32>() / d as f32;
                        let mean_gx =
                            gxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for ((o, h), xh) in dst.iter_mut().zip(&gxhat).zip(xr) {
                            *o += rstd[r] * (h - mean_g - xh * mean_gx);
                        }
                    }
                });
            }
            Op::ColNormalize { x, denom } => {
                let c = denom.len();
                let mut dot = vec![0.0; c];
                for (gr, wr) in g.chunks(c).zip(out.chunks(c)) {
                    for ((d, a), w) in dot.iter_mut().zip(gr).zip(wr) {
                        *d += a * w;
                    }
                }
                self.acc(grads, *x, |gx| {
                    for (dst, gr) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for (j, (o, a)) in dst.iter_mut().zip(gr).enumerate() {
                            *o += (a - dot[j]) / denom[j];
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f32;
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).rows_cols();
                let inv = 1.0 / r as f32;
                self.acc(grads, *x, |gx| {
                    for chunk in gx.chunks_mut(c.max(1)) {
                        axpy(chunk, g, inv);
                    }
                });
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let k = 2.0 * g[0] / pv.len().max(1) as f32;
                self.acc(grads, *p, |gp| {
                    for ((o, a), b) in gp.iter_mut().zip(pv).zip(tv) {
                        *o += k * (a - b);
                    }
                });
                self.acc(grads, *t, |gt| {
                    for ((o, a), b) in gt.iter_mut().zip(pv).zip(tv) {
                        *o -= k * (a - b);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len().max(1);
                let k = g[0] / labels.len().max(1) as f32;
                self.acc(grads, *logits, |gl| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == l { 1.0 } else { 0.0 };
                            gl[i * c + j] += k * (probs[i * c + j] - target);
                        }
                    }
                });
            }
            Op::Gather { x, rows } => {
                let c = self.value(*x).rows_cols().1;
                self.acc(grads, *x, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |gp| axpy(gp, &g[offset..offset + n], 1.0));
                    offset += n;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| axpy(gx, g, 1.0)),
            Op::AvgPool { x, stride } => {
                let xv = self.value(*x);
                let (lead, h, w, d) =
                    pool_layout(xv, *stride).expect("validated during forward");
                let s = *stride;
                let (ho, wo) = (h / s, w / s);
                let inv = 1.0 / (s * s) as f32;
                self.acc(grads, *x, |gx| {
                    for b in 0..lead {
                        for i in 0..h {
                            for j in 0..w {
                                let src = ((b * ho + i / s) * wo + j / s) * d;
                                let dst = ((b * h + i) * w + j) * d;
                                axpy(&mut gx[dst..dst + d], &g[src..src + d], inv);
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if self.requires_grad(v) {
            f(slot(grads, v, self.value(v).numel()));
        }
    }
}

const GELU_K: f32 = 1.702;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, n: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn axpy(dst: &mut [f32], src: &[f32], alpha: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
