//! Operation kinds with their forward rules and vector-Jacobian products.
//!
//! No broadcasting: elementwise binary ops need identical shapes, and the few
//! row/column broadcasts the models need are separate op kinds.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Below this magnitude `(exp(z) - 1) / z` switches to its series expansion.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

/// Inputs above this are passed through softplus unchanged.
const SOFTPLUS_LINEAR_ABOVE: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    /// `[m, k] x [k, n] -> [m, n]`
    Matmul,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Silu,
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// Sum of all elements, shape `[1]`.
    Sum,
    Reshape(Vec<usize>),
    Transpose2d,
    /// Contiguous range along axis 0 or 1.
    Slice { axis: usize, start: usize, len: usize },
    /// Variadic concatenation along axis 0 or 1.
    Concat { axis: usize },
    /// Along the last axis.
    Softmax,
    /// Softmax cross-entropy of flattened logits against a class index.
    CrossEntropy { label: usize },
    Neg,
    Scale(f32),
    /// `[l, d] -> [1, d]`
    MeanRows,
    /// `[l, d] + [d]` broadcast over rows.
    AddRow,
    /// `[l, d] * [d]` broadcast over rows.
    MulRow,
    /// `[l, d] * [l]` broadcast over columns.
    MulCol,
    /// `[l] (x) [n] -> [l, n]`
    Outer,
    /// Row-wise layer normalization with affine `gamma`, `beta`.
    LayerNorm { eps: f32 },
    /// `out[i] = input[index[i]]` over the flattened input.
    Gather {
        index: Arc<[usize]>,
        shape: Vec<usize>,
    },
    /// `(exp(z) - 1) / z`, the zero-order-hold input factor.
    ZohPhi,
    /// Diagonal selective scan with zero initial state:
    /// `h[t] = a[t] * h[t-1] + b[t] u[t]`, `y[t] = <c[t], h[t]>`, per channel of `u`.
    SelectiveScan,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Matmul => "matmul",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Silu => "silu",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Reshape(_) => "reshape",
            Op::Transpose2d => "transpose2d",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Softmax => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::MeanRows => "mean_rows",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::MulCol => "mul_col",
            Op::Outer => "outer",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::ZohPhi => "zoh_phi",
            Op::SelectiveScan => "selective_scan",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Concat { .. } => None,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Matmul
            | Op::AddRow
            | Op::MulRow
            | Op::MulCol
            | Op::Outer => Some(2),
            Op::LayerNorm { .. } => Some(3),
            Op::SelectiveScan => Some(4),
            _ => Some(1),
        }
    }
}

fn c<T: Real>(v: f64) -> T {
    T::from_f64(v)
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > c(SOFTPLUS_LINEAR_ABOVE) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `(exp(z) - 1) / z`, evaluated in `f64` with a series fallback near zero.
pub fn zoh_phi(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + z / 2.0
    } else {
        z.exp_m1() / z
    }
}

fn zoh_phi_grad(z: f64) -> f64 {
    // (e^z - phi(z)) / z cancels badly near zero; the series is exact to ~z^3/30 there.
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0
    } else {
        (z.exp() - z.exp_m1() / z) / z
    }
}

fn same_shape<T: Real>(op: &Op, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op.name(), a.shape(), b.shape()))
    }
}

fn numel_is<T: Real>(op: &Op, t: &Tensor<T>, n: usize, other: &Tensor<T>) -> Result<()> {
    if t.len() == n {
        Ok(())
    } else {
        Err(Error::shape(op.name(), other.shape(), t.shape()))
    }
}

fn matmul_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    T::gemm(m, k, n, (a, k as isize, 1), (b, n as isize, 1), T::zero(), out, n as isize);
}

/// Forward rule. Returns the output and any saved intermediates.
pub(crate) fn forward<T: Real>(op: &Op, x: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<T>)> {
    if let Some(n) = op.arity() {
        if x.len() != n {
            return Err(Error::op(
                op.name(),
                format!("expected {n} inputs, got {}", x.len()),
            ));
        }
    } else if x.is_empty() {
        return Err(Error::op(op.name(), "needs at least one input"));
    }
    let none = Vec::new();
    let out = match op {
        Op::Add | Op::Sub | Op::Mul => {
            same_shape(op, x[0], x[1])?;
            let f = match op {
                Op::Add => |a: T, b: T| a + b,
                Op::Sub => |a: T, b: T| a - b,
                _ => |a: T, b: T| a * b,
            };
            let data = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::from_parts(x[0].shape().to_vec(), data)
        }
        Op::Matmul => {
            let (m, k) = x[0].dims2("matmul")?;
            let (k2, n) = x[1].dims2("matmul")?;
            if k != k2 {
                return Err(Error::shape("matmul", x[0].shape(), x[1].shape()));
            }
            let mut out = vec![T::zero(); m * n];
            matmul_into(x[0].data(), x[1].data(), m, k, n, &mut out);
            Tensor::from_parts(vec![m, n], out)
        }
        Op::Exp => x[0].map(|v| v.exp()),
        Op::Log => x[0].map(|v| v.ln()),
        Op::Softplus => x[0].map(softplus),
        Op::Sigmoid => x[0].map(sigmoid),
        Op::Silu => x[0].map(|v| v * sigmoid(v)),
        Op::Neg => x[0].map(|v| -v),
        Op::Scale(s) => {
            let s = T::from_f64(*s as f64);
            x[0].map(|v| v * s)
        }
        Op::ZohPhi => x[0].map(|v| T::from_f64(zoh_phi(v.to_f64()))),
        Op::Sum => Tensor::scalar(x[0].data().iter().copied().sum()),
        Op::Mean => {
            let s: T = x[0].data().iter().copied().sum();
            Tensor::scalar(s / T::from_f64(x[0].len() as f64))
        }
        Op::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != x[0].len() || shape.iter().any(|&d| d == 0) {
                return Err(Error::shape("reshape", x[0].shape(), shape));
            }
            Tensor::from_parts(shape.clone(), x[0].data().to_vec())
        }
        Op::Transpose2d => {
            let (r, cols) = x[0].dims2("transpose2d")?;
            let d = x[0].data();
            let mut out = vec![T::zero(); r * cols];
            for i in 0..r {
                for j in 0..cols {
                    out[j * r + i] = d[i * cols + j];
                }
            }
            Tensor::from_parts(vec![cols, r], out)
        }
        Op::Slice { axis, start, len } => slice_forward(op, x[0], *axis, *start, *len)?,
        Op::Concat { axis } => concat_forward(op, x, *axis)?,
        Op::Softmax => {
            let cols = *x[0].shape().last().unwrap();
            let mut out = x[0].data().to_vec();
            for row in out.chunks_mut(cols) {
                softmax_inplace(row);
            }
            Tensor::from_parts(x[0].shape().to_vec(), out)
        }
        Op::CrossEntropy { label } => {
            let k = x[0].len();
            if *label >= k {
                return Err(Error::op(
                    "cross_entropy",
                    format!("label {label} out of range for {k} logits"),
                ));
            }
            let mut p = x[0].data().to_vec();
            let max = p.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + p.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let loss = lse - x[0].data()[*label];
            softmax_inplace(&mut p);
            return Ok((Tensor::scalar(loss), p));
        }
        Op::MeanRows => {
            let (l, d) = x[0].dims2("mean_rows")?;
            let mut out = vec![T::zero(); d];
            for row in x[0].data().chunks(d) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            let inv = T::one() / T::from_f64(l as f64);
            out.iter_mut().for_each(|o| *o = *o * inv);
            Tensor::from_parts(vec![1, d], out)
        }
        Op::AddRow | Op::MulRow => {
            let (_, d) = x[0].dims2(op.name())?;
            numel_is(op, x[1], d, x[0])?;
            let r = x[1].data();
            let add = matches!(op, Op::AddRow);
            let mut out = x[0].data().to_vec();
            for row in out.chunks_mut(d) {
                for (o, &v) in row.iter_mut().zip(r) {
                    *o = if add { *o + v } else { *o * v };
                }
            }
            Tensor::from_parts(x[0].shape().to_vec(), out)
        }
        Op::MulCol => {
            let (l, d) = x[0].dims2("mul_col")?;
            numel_is(op, x[1], l, x[0])?;
            let mut out = x[0].data().to_vec();
            for (row, &s) in out.chunks_mut(d).zip(x[1].data()) {
                row.iter_mut().for_each(|o| *o = *o * s);
            }
            Tensor::from_parts(x[0].shape().to_vec(), out)
        }
        Op::Outer => {
            let (l, n) = (x[0].len(), x[1].len());
            let mut out = Vec::with_capacity(l * n);
            for &a in x[0].data() {
                out.extend(x[1].data().iter().map(|&b| a * b));
            }
            Tensor::from_parts(vec![l, n], out)
        }
        Op::LayerNorm { eps } => return layer_norm_forward(op, x, T::from_f64(*eps as f64)),
        Op::Gather { index, shape } => {
            let n: usize = shape.iter().product();
            if n != index.len() || shape.iter().any(|&d| d == 0) {
                return Err(Error::op(
                    "gather",
                    format!("output shape {shape:?} does not match {} indices", index.len()),
                ));
            }
            let src = x[0].data();
            if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
                return Err(Error::op(
                    "gather",
                    format!("index {bad} out of range for input of shape {:?}", x[0].shape()),
                ));
            }
            Tensor::from_parts(shape.clone(), index.iter().map(|&i| src[i]).collect())
        }
        Op::SelectiveScan => return scan_forward(x),
    };
    Ok((out, none))
}

fn softmax_inplace<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn slice_forward<T: Real>(
    op: &Op,
    t: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let (rows, cols) = match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => return Err(Error::op(op.name(), format!("rank {} unsupported", s.len()))),
    };
    let rank1 = t.rank() == 1;
    let extent = match (rank1, axis) {
        (true, 0) | (false, 1) => cols,
        (false, 0) => rows,
        _ => return Err(Error::op(op.name(), format!("axis {axis} out of range"))),
    };
    if len == 0 || start + len > extent {
        return Err(Error::op(
            op.name(),
            format!("range {start}..{} exceeds extent {extent}", start + len),
        ));
    }
    let d = t.data();
    Ok(if rank1 {
        Tensor::from_parts(vec![len], d[start..start + len].to_vec())
    } else if axis == 0 {
        Tensor::from_parts(vec![len, cols], d[start * cols..(start + len) * cols].to_vec())
    } else {
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        Tensor::from_parts(vec![rows, len], out)
    })
}

fn concat_forward<T: Real>(op: &Op, x: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = x[0];
    if first.rank() == 1 {
        if axis != 0 {
            return Err(Error::op(op.name(), "rank-1 concat only along axis 0"));
        }
        let mut out = Vec::new();
        for t in x {
            if t.rank() != 1 {
                return Err(Error::shape(op.name(), first.shape(), t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let n = out.len();
        return Ok(Tensor::from_parts(vec![n], out));
    }
    let (rows, cols) = first.dims2(op.name())?;
    match axis {
        0 => {
            let mut out = Vec::new();
            let mut total = 0;
            for t in x {
                let (r, c) = t.dims2(op.name())?;
                if c != cols {
                    return Err(Error::shape(op.name(), first.shape(), t.shape()));
                }
                total += r;
                out.extend_from_slice(t.data());
            }
            Ok(Tensor::from_parts(vec![total, cols], out))
        }
        1 => {
            let mut widths = Vec::with_capacity(x.len());
            for t in x {
                let (r, c) = t.dims2(op.name())?;
                if r != rows {
                    return Err(Error::shape(op.name(), first.shape(), t.shape()));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (t, &w) in x.iter().zip(&widths) {
                    out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            Ok(Tensor::from_parts(vec![rows, total], out))
        }
        _ => Err(Error::op(op.name(), format!("axis {axis} out of range"))),
    }
}

fn layer_norm_forward<T: Real>(op: &Op, x: &[&Tensor<T>], eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let (l, d) = x[0].dims2("layer_norm")?;
    numel_is(op, x[1], d, x[0])?;
    numel_is(op, x[2], d, x[0])?;
    let (gamma, beta) = (x[1].data(), x[2].data());
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut out = Vec::with_capacity(l * d);
    let mut saved = vec![T::zero(); 2 * l];
    for (r, row) in x[0].data().chunks(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        saved[r] = mean;
        saved[l + r] = rstd;
        for j in 0..d {
            out.push((row[j] - mean) * rstd * gamma[j] + beta[j]);
        }
    }
    Ok((Tensor::from_parts(vec![l, d], out), saved))
}

fn scan_forward<T: Real>(x: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<T>)> {
    let (l, n) = x[0].dims2("selective_scan")?;
    for t in &x[1..3] {
        if t.shape() != x[0].shape() {
            return Err(Error::shape("selective_scan", x[0].shape(), t.shape()));
        }
    }
    let (lu, e) = x[3].dims2("selective_scan")?;
    if lu != l {
        return Err(Error::shape("selective_scan", x[0].shape(), x[3].shape()));
    }
    let (a, b, cc, u) = (x[0].data(), x[1].data(), x[2].data(), x[3].data());
    // states[t] is the [n, e] state after consuming step t
    let mut states = vec![T::zero(); l * n * e];
    let mut y = vec![T::zero(); l * e];
    for t in 0..l {
        let urow = &u[t * e..(t + 1) * e];
        let yrow = &mut y[t * e..(t + 1) * e];
        for s in 0..n {
            let (at, bt, ct) = (a[t * n + s], b[t * n + s], cc[t * n + s]);
            let cur = (t * n + s) * e;
            if t == 0 {
                for j in 0..e {
                    states[cur + j] = bt * urow[j];
                }
            } else {
                let prev = ((t - 1) * n + s) * e;
                for j in 0..e {
                    states[cur + j] = at * states[prev + j] + bt * urow[j];
                }
            }
            for j in 0..e {
                yrow[j] = yrow[j] + ct * states[cur + j];
            }
        }
    }
    Ok((Tensor::from_parts(vec![l, e], y), states))
}

/// Vector-Jacobian product. `need[i]` says whether input `i` wants a gradient.
pub(crate) fn backward<T: Real>(
    op: &Op,
    x: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &[T],
    g: &[T],
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    let mut grads: Vec<Option<Vec<T>>> = vec![None; x.len()];
    let unary = |f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
        x[0].data()
            .iter()
            .zip(out.data())
            .zip(g)
            .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
            .collect()
    };
    match op {
        Op::Add => {
            grads[0] = need[0].then(|| g.to_vec());
            grads[1] = need[1].then(|| g.to_vec());
        }
        Op::Sub => {
            grads[0] = need[0].then(|| g.to_vec());
            grads[1] = need[1].then(|| g.iter().map(|&v| -v).collect());
        }
        Op::Mul => {
            grads[0] = need[0].then(|| g.iter().zip(x[1].data()).map(|(&a, &b)| a * b).collect());
            grads[1] = need[1].then(|| g.iter().zip(x[0].data()).map(|(&a, &b)| a * b).collect());
        }
        Op::Matmul => {
            let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
            let n = x[1].shape()[1];
            let (a, b) = (x[0].data(), x[1].data());
            if need[0] {
                // dA = G B^T
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, (g, n as isize, 1), (b, 1, n as isize), T::zero(), &mut da, k as isize);
                grads[0] = Some(da);
            }
            if need[1] {
                // dB = A^T G
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, (a, 1, k as isize), (g, n as isize, 1), T::zero(), &mut db, n as isize);
                grads[1] = Some(db);
            }
        }
        Op::Exp => grads[0] = Some(unary(&|_, y, gi| gi * y)),
        Op::Log => grads[0] = Some(unary(&|xi, _, gi| gi / xi)),
        Op::Softplus => grads[0] = Some(unary(&|xi, _, gi| gi * sigmoid(xi))),
        Op::Sigmoid => grads[0] = Some(unary(&|_, y, gi| gi * y * (T::one() - y))),
        Op::Silu => {
            grads[0] = Some(unary(&|xi, _, gi| {
                let s = sigmoid(xi);
                gi * (s + xi * s * (T::one() - s))
            }))
        }
        Op::Neg => grads[0] = Some(g.iter().map(|&v| -v).collect()),
        Op::Scale(s) => {
            let s = T::from_f64(*s as f64);
            grads[0] = Some(g.iter().map(|&v| v * s).collect());
        }
        Op::ZohPhi => {
            grads[0] = Some(unary(&|xi, _, gi| gi * T::from_f64(zoh_phi_grad(xi.to_f64()))))
        }
        Op::Sum => grads[0] = Some(vec![g[0]; x[0].len()]),
        Op::Mean => {
            let v = g[0] / T::from_f64(x[0].len() as f64);
            grads[0] = Some(vec![v; x[0].len()]);
        }
        Op::Reshape(_) => grads[0] = Some(g.to_vec()),
        Op::Transpose2d => {
            let (r, cols) = (x[0].shape()[0], x[0].shape()[1]);
            let mut dx = vec![T::zero(); r * cols];
            for i in 0..r {
                for j in 0..cols {
                    dx[i * cols + j] = g[j * r + i];
                }
            }
            grads[0] = Some(dx);
        }
        Op::Slice { axis, start, len } => {
            let mut dx = vec![T::zero(); x[0].len()];
            match (x[0].shape(), axis) {
                ([_], _) => dx[*start..start + len].copy_from_slice(g),
                ([_, cols], 0) => dx[start * cols..(start + len) * cols].copy_from_slice(g),
                ([rows, cols], _) => {
                    for r in 0..*rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                }
                _ => unreachable!("validated in forward"),
            }
            grads[0] = Some(dx);
        }
        Op::Concat { axis } => {
            if x[0].rank() == 1 || *axis == 0 {
                let mut off = 0;
                for (i, t) in x.iter().enumerate() {
                    if need[i] {
                        grads[i] = Some(g[off..off + t.len()].to_vec());
                    }
                    off += t.len();
                }
            } else {
                let rows = x[0].shape()[0];
                let total = out.shape()[1];
                let mut off = 0;
                for (i, t) in x.iter().enumerate() {
                    let w = t.shape()[1];
                    if need[i] {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        grads[i] = Some(dx);
                    }
                    off += w;
                }
            }
        }
        Op::Softmax => {
            let cols = *out.shape().last().unwrap();
            let mut dx = Vec::with_capacity(out.len());
            for (y, gr) in out.data().chunks(cols).zip(g.chunks(cols)) {
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(y.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            grads[0] = Some(dx);
        }
        Op::CrossEntropy { label } => {
            let mut dx: Vec<T> = saved.iter().map(|&p| p * g[0]).collect();
            dx[*label] = dx[*label] - g[0];
            grads[0] = Some(dx);
        }
        Op::MeanRows => {
            let (l, d) = (x[0].shape()[0], x[0].shape()[1]);
            let inv = T::one() / T::from_f64(l as f64);
            let mut dx = Vec::with_capacity(l * d);
            for _ in 0..l {
                dx.extend(g.iter().map(|&v| v * inv));
            }
            grads[0] = Some(dx);
        }
        Op::AddRow => {
            let d = x[1].len();
            grads[0] = need[0].then(|| g.to_vec());
            if need[1] {
                let mut db = vec![T::zero(); d];
                for row in g.chunks(d) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                grads[1] = Some(db);
            }
        }
        Op::MulRow => {
            let d = x[1].len();
            let r = x[1].data();
            if need[0] {
                let mut dx = g.to_vec();
                for row in dx.chunks_mut(d) {
                    for (o, &v) in row.iter_mut().zip(r) {
                        *o = *o * v;
                    }
                }
                grads[0] = Some(dx);
            }
            if need[1] {
                let mut dr = vec![T::zero(); d];
                for (grow, xrow) in g.chunks(d).zip(x[0].data().chunks(d)) {
                    for j in 0..d {
                        dr[j] = dr[j] + grow[j] * xrow[j];
                    }
                }
                grads[1] = Some(dr);
            }
        }
        Op::MulCol => {
            let d = x[0].shape()[1];
            if need[0] {
                let mut dx = g.to_vec();
                for (row, &s) in dx.chunks_mut(d).zip(x[1].data()) {
                    row.iter_mut().for_each(|o| *o = *o * s);
                }
                grads[0] = Some(dx);
            }
            if need[1] {
                grads[1] = Some(
                    g.chunks(d)
                        .zip(x[0].data().chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect(),
                );
            }
        }
        Op::Outer => {
            let n = x[1].len();
            if need[0] {
                grads[0] = Some(
                    g.chunks(n)
                        .map(|gr| gr.iter().zip(x[1].data()).map(|(&a, &b)| a * b).sum())
                        .collect(),
                );
            }
            if need[1] {
                let mut db = vec![T::zero(); n];
                for (gr, &a) in g.chunks(n).zip(x[0].data()) {
                    for (o, &gv) in db.iter_mut().zip(gr) {
                        *o = *o + gv * a;
                    }
                }
                grads[1] = Some(db);
            }
        }
        Op::LayerNorm { .. } => layer_norm_backward(x, saved, g, need, &mut grads),
        Op::Gather { index, .. } => {
            let mut dx = vec![T::zero(); x[0].len()];
            for (&i, &gv) in index.iter().zip(g) {
                dx[i] = dx[i] + gv;
            }
            grads[0] = Some(dx);
        }
        Op::SelectiveScan => scan_backward(x, saved, g, need, &mut grads),
    }
    for (slot, &wanted) in grads.iter_mut().zip(need) {
        if !wanted {
            *slot = None;
        }
    }
    grads
}

fn layer_norm_backward<T: Real>(
    x: &[&Tensor<T>],
    saved: &[T],
    g: &[T],
    need: &[bool],
    grads: &mut [Option<Vec<T>>],
) {
    let (l, d) = (x[0].shape()[0], x[0].shape()[1]);
    let gamma = x[1].data();
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut dx = vec![T::zero(); l * d];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..l {
        let (mean, rstd) = (saved[r], saved[l + r]);
        let row = &x[0].data()[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = grow[j] * gamma[j];
            dgamma[j] = dgamma[j] + grow[j] * xhat[j];
            dbeta[j] = dbeta[j] + grow[j];
        }
        let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for j in 0..d {
            dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    grads[0] = need[0].then_some(dx);
    grads[1] = need[1].then_some(dgamma);
    grads[2] = need[2].then_some(dbeta);
}

fn scan_backward<T: Real>(
    x: &[&Tensor<T>],
    states: &[T],
    g: &[T],
    need: &[bool],
    grads: &mut [Option<Vec<T>>],
) {
    let (l, n) = (x[0].shape()[0], x[0].shape()[1]);
    let e = x[3].shape()[1];
    let (a, b, cc, u) = (x[0].data(), x[1].data(), x[2].data(), x[3].data());
    let mut da = vec![T::zero(); l * n];
    let mut db = vec![T::zero(); l * n];
    let mut dc = vec![T::zero(); l * n];
    let mut du = vec![T::zero(); l * e];
    // running adjoint of the state, [n, e]
    let mut dh = vec![T::zero(); n * e];
    for t in (0..l).rev() {
        let grow = &g[t * e..(t + 1) * e];
        let urow = &u[t * e..(t + 1) * e];
        for s in 0..n {
            let cur = (t * n + s) * e;
            let ct = cc[t * n + s];
            let bt = b[t * n + s];
            let next_a = if t + 1 < l { a[(t + 1) * n + s] } else { T::zero() };
            let dhs = &mut dh[s * e..(s + 1) * e];
            let mut acc_c = T::zero();
            let mut acc_a = T::zero();
            let mut acc_b = T::zero();
            for j in 0..e {
                let h = states[cur + j];
                acc_c = acc_c + grow[j] * h;
                let adj = ct * grow[j] + next_a * dhs[j];
                dhs[j] = adj;
                if t > 0 {
                    acc_a = acc_a + adj * states[cur - n * e + j];
                }
                acc_b = acc_b + adj * urow[j];
                du[t * e + j] = du[t * e + j] + adj * bt;
            }
            dc[t * n + s] = acc_c;
            da[t * n + s] = acc_a;
            db[t * n + s] = acc_b;
        }
    }
    grads[0] = need[0].then_some(da);
    grads[1] = need[1].then_some(db);
    grads[2] = need[2].then_some(dc);
    grads[3] = need[3].then_some(du);
}

/// Forward-only evaluation of an op on plain tensors.
pub fn apply<T: Real>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    forward(op, inputs).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f32]) -> Tensor {
        Tensor::vector(d.to_vec())
    }

    #[test]
    fn add_is_elementwise() {
        let out = apply(&Op::Add, &[&v(&[1.0, 2.0]), &v(&[3.0, 4.0])]).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let out = apply(&Op::Softmax, &[&v(&[0.0, 0.0])]).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // -ln(3/4) with logits ln 1, ln 3 and label 1
        let oracle = -(3.0f64 / 4.0).ln();
        let logits = v(&[1.0f32.ln(), 3.0f32.ln()]);
        let out = apply(&Op::CrossEntropy { label: 1 }, &[&logits]).unwrap();
        assert!((out.item().unwrap() as f64 - oracle).abs() < 1e-6);
        assert!((out.item().unwrap() - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn shape_errors_name_the_op_and_shapes() {
        let err = apply(&Op::Add, &[&v(&[1.0, 2.0]), &v(&[1.0, 2.0, 3.0])]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let msg = apply(&Op::Matmul, &[&a, &b]).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let out = apply(&Op::Softplus, &[&v(&[100.0, 25.0, -100.0, 0.0])]).unwrap();
        assert_eq!(out.data()[0], 100.0);
        assert_eq!(out.data()[1], 25.0);
        assert!(out.data()[2] >= 0.0 && out.data()[2] < 1e-30);
        assert!((out.data()[3] - 2.0f32.ln()).abs() < 1e-7);
        assert!(out.all_finite());
    }

    #[test]
    fn zoh_phi_series_branch_is_continuous() {
        let taylor = |z: f64| 1.0 + z / 2.0 + z * z / 6.0;
        for z in [0.999e-4, 1.001e-4, -0.999e-4, -1.001e-4] {
            assert!((zoh_phi(z) - taylor(z)).abs() < 1e-8, "{z}");
        }
        assert!((zoh_phi(-1.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn gather_rejects_out_of_range_indices() {
        let op = Op::Gather {
            index: vec![0, 5].into(),
            shape: vec![2],
        };
        assert!(apply(&op, &[&v(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn slice_and_concat_invert() {
        let m = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let left = apply(&Op::Slice { axis: 1, start: 0, len: 1 }, &[&m]).unwrap();
        let right = apply(&Op::Slice { axis: 1, start: 1, len: 2 }, &[&m]).unwrap();
        assert_eq!(left.data(), &[1., 4.]);
        let back = apply(&Op::Concat { axis: 1 }, &[&left, &right]).unwrap();
        assert_eq!(back, m);
    }
}
