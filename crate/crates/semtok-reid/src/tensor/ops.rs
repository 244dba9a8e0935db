//! Differentiable primitives: forward kernels and backward rules.
//!
//! Each operation validates shapes, computes its result eagerly, and records
//! itself as an `Op` node holding handles to its inputs. Backward rules are
//! the standard vector-Jacobian products; gradients with respect to
//! broadcast operands are reduced (summed) back to the operand shape.

use super::Tensor;
use crate::error::{Error, Result};

const GELU_COEFF: f64 = 0.044715;

pub(crate) enum Op {
    Matmul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Neg(Tensor),
    Gelu(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    ClampMin(Tensor, f64),
    GatherRows(Tensor, Vec<usize>),
    Concat(Vec<Tensor>, usize),
    Slice {
        input: Tensor,
        axis: usize,
        start: usize,
        len: usize,
    },
    Transpose(Tensor),
    SumAll(Tensor),
    MeanAll(Tensor),
    SumAxis(Tensor, usize),
    MeanAxis(Tensor, usize),
    BroadcastTo(Tensor),
    Softmax(Tensor, usize),
    LayerNorm {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Neg(a)
            | Op::Gelu(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::ClampMin(a, _)
            | Op::GatherRows(a, _)
            | Op::Slice { input: a, .. }
            | Op::Transpose(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::BroadcastTo(a)
            | Op::Softmax(a, _) => vec![a],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
        }
    }

    /// Apply this node's vector-Jacobian product, accumulating into inputs.
    pub(crate) fn backward(&self, out: &Tensor, grad: &[f64]) -> Result<()> {
        match self {
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let p = b.shape()[1];
                if a.requires_grad() {
                    // dA = g · Bᵀ; materializing Bᵀ keeps the inner loop
                    // contiguous on both operands
                    let bd = b.data();
                    let mut bt = vec![0.0; k * p];
                    for l in 0..k {
                        for j in 0..p {
                            bt[j * k + l] = bd[l * p + j];
                        }
                    }
                    let da = matmul_kernel(grad, &bt, m, p, k);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = Aᵀ · g
                    let ad = a.data();
                    let mut db = vec![0.0; k * p];
                    for i in 0..m {
                        let a_row = &ad[i * k..(i + 1) * k];
                        let g_row = &grad[i * p..(i + 1) * p];
                        for (l, &a_il) in a_row.iter().enumerate() {
                            axpy(a_il, g_row, &mut db[l * p..(l + 1) * p]);
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }
            Op::Add(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(&reduce_to_shape(grad, out.shape(), a.shape()));
                }
                if b.requires_grad() {
                    b.accumulate_grad(&reduce_to_shape(grad, out.shape(), b.shape()));
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(&reduce_to_shape(grad, out.shape(), a.shape()));
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    b.accumulate_grad(&reduce_to_shape(&neg, out.shape(), b.shape()));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                if a.shape() == b.shape() {
                    if a.requires_grad() {
                        let da: Vec<f64> = grad.iter().zip(bd.iter()).map(|(g, y)| g * y).collect();
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let db: Vec<f64> = grad.iter().zip(ad.iter()).map(|(g, x)| g * x).collect();
                        b.accumulate_grad(&db);
                    }
                } else {
                    let sa = bcast_strides(a.shape(), out.shape());
                    let sb = bcast_strides(b.shape(), out.shape());
                    if a.requires_grad() {
                        let mut da = vec![0.0; a.numel()];
                        for_each_bcast2(out.shape(), &sa, &sb, |io, ia, ib| {
                            da[ia] += grad[io] * bd[ib];
                        });
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let mut db = vec![0.0; b.numel()];
                        for_each_bcast2(out.shape(), &sa, &sb, |io, ia, ib| {
                            db[ib] += grad[io] * ad[ia];
                        });
                        b.accumulate_grad(&db);
                    }
                }
            }
            Op::AddScalar(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(grad);
                }
            }
            Op::MulScalar(a, c) => {
                if a.requires_grad() {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Neg(a) => {
                if a.requires_grad() {
                    let da: Vec<f64> = grad.iter().map(|g| -g).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Gelu(a) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let da: Vec<f64> = ad
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| g * gelu_derivative(x))
                        .collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Log(a) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let da: Vec<f64> = ad.iter().zip(grad).map(|(&x, &g)| g / x).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Sqrt(a) => {
                if a.requires_grad() {
                    let od = out.data();
                    let da: Vec<f64> = od.iter().zip(grad).map(|(&y, &g)| g * 0.5 / y).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::ClampMin(a, min) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let da: Vec<f64> = ad
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| if x > *min { g } else { 0.0 })
                        .collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::GatherRows(a, ids) => {
                if a.requires_grad() {
                    let cols = a.shape()[1];
                    let mut da = vec![0.0; a.numel()];
                    for (i, &row) in ids.iter().enumerate() {
                        axpy(
                            1.0,
                            &grad[i * cols..(i + 1) * cols],
                            &mut da[row * cols..(row + 1) * cols],
                        );
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let out_len = out.shape()[*axis];
                let mut offset = 0usize;
                for part in parts {
                    let len = part.shape()[*axis];
                    if part.requires_grad() {
                        let mut dp = vec![0.0; part.numel()];
                        for o in 0..outer {
                            let src = (o * out_len + offset) * inner;
                            let dst = o * len * inner;
                            dp[dst..dst + len * inner]
                                .copy_from_slice(&grad[src..src + len * inner]);
                        }
                        part.accumulate_grad(&dp);
                    }
                    offset += len;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                if input.requires_grad() {
                    let (outer, in_len, inner) = axis_split(input.shape(), *axis);
                    let mut da = vec![0.0; input.numel()];
                    for o in 0..outer {
                        let dst = (o * in_len + start) * inner;
                        let src = o * len * inner;
                        da[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
                    }
                    input.accumulate_grad(&da);
                }
            }
            Op::Transpose(a) => {
                if a.requires_grad() {
                    let (r, c) = (a.shape()[0], a.shape()[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            da[j * c + i] = grad[i * r + j];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::SumAll(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(&vec![grad[0]; a.numel()]);
                }
            }
            Op::MeanAll(a) => {
                if a.requires_grad() {
                    let scale = grad[0] / a.numel() as f64;
                    a.accumulate_grad(&vec![scale; a.numel()]);
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                if a.requires_grad() {
                    let (outer, len, inner) = axis_split(a.shape(), *axis);
                    let scale = match self {
                        Op::MeanAxis(..) => 1.0 / len as f64,
                        _ => 1.0,
                    };
                    let mut da = vec![0.0; a.numel()];
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                da[base + i] = grad[o * inner + i] * scale;
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::BroadcastTo(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(&reduce_to_shape(grad, out.shape(), a.shape()));
                }
            }
            Op::Softmax(a, axis) => {
                if a.requires_grad() {
                    let y = out.data();
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let mut da = vec![0.0; a.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut s = 0.0;
                            for j in 0..len {
                                let idx = base + j * inner;
                                s += grad[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                da[idx] = (grad[idx] - s) * y[idx];
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let cols = *input.shape().last().unwrap();
                let rows = input.numel() / cols;
                let xd = input.data();
                let gd = gamma.data();
                let mut d_input = if input.requires_grad() {
                    vec![0.0; input.numel()]
                } else {
                    Vec::new()
                };
                let mut d_gamma = vec![0.0; cols];
                let mut d_beta = vec![0.0; cols];
                for r in 0..rows {
                    let x = &xd[r * cols..(r + 1) * cols];
                    let g = &grad[r * cols..(r + 1) * cols];
                    let mean = x.iter().sum::<f64>() / cols as f64;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    if gamma.requires_grad() || beta.requires_grad() {
                        for c in 0..cols {
                            let xhat = (x[c] - mean) * inv_std;
                            d_gamma[c] += g[c] * xhat;
                            d_beta[c] += g[c];
                        }
                    }
                    if input.requires_grad() {
                        let mut mean_gg = 0.0;
                        let mut mean_ggx = 0.0;
                        for c in 0..cols {
                            let gg = g[c] * gd[c];
                            let xhat = (x[c] - mean) * inv_std;
                            mean_gg += gg;
                            mean_ggx += gg * xhat;
                        }
                        mean_gg /= cols as f64;
                        mean_ggx /= cols as f64;
                        let dx = &mut d_input[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let gg = g[c] * gd[c];
                            let xhat = (x[c] - mean) * inv_std;
                            dx[c] = inv_std * (gg - mean_gg - xhat * mean_ggx);
                        }
                    }
                }
                if input.requires_grad() {
                    input.accumulate_grad(&d_input);
                }
                if gamma.requires_grad() {
                    gamma.accumulate_grad(&d_gamma);
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(&d_beta);
                }
            }
        }
        Ok(())
    }
}

impl Tensor {
    /// Standard matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let p = other.shape()[1];
        let out = matmul_kernel(&self.data(), &other.data(), m, k, p);
        Ok(Tensor::from_op(
            out,
            vec![m, p],
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "mul")
    }

    fn binary_elementwise(&self, other: &Tensor, which: &'static str) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or(Error::Shape {
            op: which,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        {
            let (ad, bd) = (self.data(), other.data());
            if self.shape() == other.shape() {
                match which {
                    "add" => {
                        for ((o, a), b) in out.iter_mut().zip(ad.iter()).zip(bd.iter()) {
                            *o = a + b;
                        }
                    }
                    "sub" => {
                        for ((o, a), b) in out.iter_mut().zip(ad.iter()).zip(bd.iter()) {
                            *o = a - b;
                        }
                    }
                    _ => {
                        for ((o, a), b) in out.iter_mut().zip(ad.iter()).zip(bd.iter()) {
                            *o = a * b;
                        }
                    }
                }
            } else {
                let sa = bcast_strides(self.shape(), &out_shape);
                let sb = bcast_strides(other.shape(), &out_shape);
                match which {
                    "add" => for_each_bcast2(&out_shape, &sa, &sb, |io, ia, ib| {
                        out[io] = ad[ia] + bd[ib];
                    }),
                    "sub" => for_each_bcast2(&out_shape, &sa, &sb, |io, ia, ib| {
                        out[io] = ad[ia] - bd[ib];
                    }),
                    _ => for_each_bcast2(&out_shape, &sa, &sb, |io, ia, ib| {
                        out[io] = ad[ia] * bd[ib];
                    }),
                }
            }
        }
        let op = match which {
            "add" => Op::Add(self.clone(), other.clone()),
            "sub" => Op::Sub(self.clone(), other.clone()),
            _ => Op::Mul(self.clone(), other.clone()),
        };
        Ok(Tensor::from_op(out, out_shape, op))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::AddScalar(self.clone()),
        ))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::MulScalar(self.clone(), c),
        ))
    }

    pub fn neg(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| -v).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Neg(self.clone()),
        ))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|&x| gelu_value(x)).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Gelu(self.clone()),
        ))
    }

    pub fn log(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v.ln()).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Log(self.clone()),
        ))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v.sqrt()).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Sqrt(self.clone()),
        ))
    }

    pub fn clamp_min(&self, min: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v.max(min)).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::ClampMin(self.clone(), min),
        ))
    }

    /// Select rows of a 2-d tensor. Serves as the embedding-table lookup:
    /// gradients scatter-add into the source rows.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "row",
                index: bad,
                len: rows,
            });
        }
        let d = self.data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), cols],
            Op::GatherRows(self.clone(), ids.to_vec()),
        ))
    }

    /// Concatenate tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| {
            Error::Contract("concat requires at least one input".into())
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let mut out_shape = first.shape().to_vec();
        for part in &parts[1..] {
            if part.shape().len() != rank
                || part
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: part.shape().to_vec(),
                });
            }
            out_shape[axis] += part.shape()[axis];
        }
        let (outer, out_len, inner) = axis_split(&out_shape, axis);
        let mut out = vec![0.0; outer * out_len * inner];
        let mut offset = 0usize;
        for part in parts {
            let len = part.shape()[axis];
            let pd = part.data();
            for o in 0..outer {
                let dst = (o * out_len + offset) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&pd[src..src + len * inner]);
            }
            offset += len;
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(out, out_shape, Op::Concat(owned, axis)))
    }

    /// Contiguous sub-range along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                lhs: self.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, in_len, inner) = axis_split(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let d = self.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * in_len + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
        }
        Ok(Tensor::from_op(
            out,
            out_shape,
            Op::Slice {
                input: self.clone(),
                axis,
                start,
                len,
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(Tensor::from_op(out, vec![c, r], Op::Transpose(self.clone())))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        Ok(Tensor::from_op(vec![s], vec![1], Op::SumAll(self.clone())))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        Ok(Tensor::from_op(
            vec![s / self.numel() as f64],
            vec![1],
            Op::MeanAll(self.clone()),
        ))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::Shape {
                op: "reduce_axis",
                lhs: self.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let d = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        let mut out_shape: Vec<usize> = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let op = if mean {
            Op::MeanAxis(self.clone(), axis)
        } else {
            Op::SumAxis(self.clone(), axis)
        };
        Ok(Tensor::from_op(out, out_shape, op))
    }

    /// Tile this tensor up to `shape` following broadcasting rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let joint = broadcast_shape(self.shape(), shape);
        if joint.as_deref() != Some(shape) {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel];
        {
            let d = self.data();
            let sa = bcast_strides(self.shape(), shape);
            let zeros = vec![0usize; shape.len()];
            for_each_bcast2(shape, &sa, &zeros, |io, ia, _| {
                out[io] = d[ia];
            });
        }
        Ok(Tensor::from_op(
            out,
            shape.to_vec(),
            Op::BroadcastTo(self.clone()),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: self.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let d = self.data();
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(d[base + j * inner]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (d[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        drop(d);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Softmax(self.clone(), axis),
        ))
    }

    /// Normalize each row (last axis) to zero mean and unit variance, then
    /// apply the learnable affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let cols = *self.shape().last().unwrap();
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / cols;
        let d = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &d[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            let y = &mut out[r * cols..(r + 1) * cols];
            for c in 0..cols {
                y[c] = (x[c] - mean) * inv_std * gd[c] + bd[c];
            }
        }
        drop((d, gd, bd));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }
}

// ── kernels ──────────────────────────────────────────────────────────

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * p..(i + 1) * p];
        for (l, &a_il) in a_row.iter().enumerate() {
            axpy(a_il, &b[l * p..(l + 1) * p], c_row);
        }
    }
    c
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn gelu_value(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Decompose `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Joint broadcast shape per the right-aligned rules, if compatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 on broadcast dimensions).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0usize; out.len()];
    let mut s = 1usize;
    for d in (0..shape.len()).rev() {
        strides[off + d] = if shape[d] == out[off + d] && shape[d] != 1 {
            s
        } else if shape[d] == out[off + d] {
            // dimension of size 1 that happens to match
            s
        } else {
            0
        };
        s *= shape[d];
    }
    strides
}

/// Odometer walk over `out_shape`, yielding flat indices into the output
/// and into two (possibly broadcast) operands.
fn for_each_bcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for io in 0..numel {
        f(io, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

/// Sum `grad` (shaped `from`) down to `to` along broadcast dimensions.
pub(crate) fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    // bias pattern: (rows × cols) reduced to (cols)
    if from.len() == 2 && to.len() == 1 && to[0] == from[1] {
        let cols = from[1];
        let mut out = vec![0.0; cols];
        for row in grad.chunks_exact(cols) {
            for (o, g) in out.iter_mut().zip(row) {
                *o += g;
            }
        }
        return out;
    }
    let numel: usize = to.iter().product();
    let mut out = vec![0.0; numel];
    let st = bcast_strides(to, from);
    let zeros = vec![0usize; from.len()];
    for_each_bcast2(from, &st, &zeros, |io, it, _| {
        out[it] += grad[io];
    });
    out
}
