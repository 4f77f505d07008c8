//! Dense row-major `f32` tensors and the forward kernels shared by the
//! differentiable graph.

use crate::error::{shape_err, Error, Result};

/// A dense tensor: dims plus a row-major payload (last dim fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("dims {dims:?} need {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Leading dim and the product of the rest; the 2-D view used by row ops.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.dims.split_first() {
            Some((&r, rest)) => (r, rest.iter().product()),
            None => (1, 1),
        }
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, cols) = self.rows_cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        let (_, cols) = self.rows_cols();
        self.data[i * cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(shape_err("transpose", format!("rank {}", self.rank())));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// `c = op(a) * op(b) + beta * c` where `a` is logically `m x k` and `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matrix_dims(op: &'static str, t: &Tensor, trans: bool) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got {:?}", t.dims)));
    }
    let (r, c) = (t.dims[0], t.dims[1]);
    Ok(if trans { (c, r) } else { (r, c) })
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_ex(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a, trans_a)?;
    let (k2, n) = matrix_dims("matmul", b, trans_b)?;
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.dims, b.dims),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, trans_a, &b.data, trans_b, &mut out, 0.0);
    Tensor::new(vec![m, n], out)?.check_finite("matmul")
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_ex(a, false, b, false)
}

/// `(outer, len, inner)` strides for iterating slices along `axis`.
pub(crate) fn axis_layout(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Softmax along `axis` with max subtraction.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(shape_err(
            "softmax",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let (outer, len, inner) = axis_layout(&x.dims, axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x.data[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x.data[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for a in 0..len {
                out[base + a * inner] *= inv;
            }
        }
    }
    Tensor::new(x.dims.clone(), out)?.check_finite("softmax")
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Normalized rows and per-row reciprocal standard deviations.
pub(crate) fn layer_norm_core(x: &Tensor, d: usize) -> (Vec<f32>, Vec<f32>) {
    let rows = x.numel() / d.max(1);
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = s;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (xhat, rstd)
}

fn check_affine(op: &'static str, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<usize> {
    let d = *x.dims.last().ok_or_else(|| shape_err(op, "rank-0 input"))?;
    if gain.numel() != d || bias.numel() != d {
        return Err(shape_err(
            op,
            format!(
                "last dim {d} vs gain {:?} / bias {:?}",
                gain.dims, bias.dims
            ),
        ));
    }
    Ok(d)
}

/// Per-row normalization over the last axis followed by an affine map.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = check_affine("layer_norm", x, gain, bias)?;
    let (mut xhat, _) = layer_norm_core(x, d);
    for row in xhat.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.dims.clone(), xhat)?.check_finite("layer_norm")
}

/// Average pooling over the two axes preceding the channel axis.
///
/// Accepts `[.., H, W, D]`; every output cell is the mean of its `s x s` block,
/// summed in row-major block order.
pub fn avg_pool_grid(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (lead, h, w, d) = pool_layout(x, stride)?;
    let (ho, wo) = (h / stride, w / stride);
    let inv = 1.0 / (stride * stride) as f32;
    let mut out = vec![0.0; lead * ho * wo * d];
    for b in 0..lead {
        for oi in 0..ho {
            for oj in 0..wo {
                let o = ((b * ho + oi) * wo + oj) * d;
                let acc = &mut out[o..o + d];
                for di in 0..stride {
                    for dj in 0..stride {
                        let i = ((b * h + oi * stride + di) * w + oj * stride + dj) * d;
                        for (a, v) in acc.iter_mut().zip(&x.data[i..i + d]) {
                            *a += v;
                        }
                    }
                }
                for a in acc.iter_mut() {
                    *a *= inv;
                }
            }
        }
    }
    let mut dims = x.dims.clone();
    let r = dims.len();
    dims[r - 3] = ho;
    dims[r - 2] = wo;
    Tensor::new(dims, out)?.check_finite("avg_pool_grid")
}

pub(crate) fn pool_layout(x: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize)> {
    let r = x.rank();
    if r < 3 {
        return Err(shape_err("avg_pool_grid", format!("need [..,H,W,D], got {:?}", x.dims)));
    }
    let (h, w, d) = (x.dims[r - 3], x.dims[r - 2], x.dims[r - 1]);
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(shape_err(
            "avg_pool_grid",
            format!("stride {stride} does not divide {h}x{w}"),
        ));
    }
    let lead = x.dims[..r - 3].iter().product();
    Ok((lead, h, w, d))
}
