//! Forward kernels. Every method records its operation on the owning tape.

use std::sync::Arc;

use super::tape::{Op, ReduceKind, UnaryKind};
use super::{
    broadcast_shape, broadcast_strides, contiguous_strides, for_each_broadcast, Tape, Tensor, Var,
};
use crate::error::{Error, Result};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, axis length, inner) element counts around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) struct MatmulDims {
    pub batch: Vec<usize>,
    pub a_strides: Vec<usize>,
    pub b_strides: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
    Ok(MatmulDims {
        a_strides: broadcast_strides(ba, &batch),
        b_strides: broadcast_strides(bb, &batch),
        batch,
        m: a[a.len() - 2],
        k: a[a.len() - 1],
        n: b[b.len() - 1],
    })
}

pub(crate) struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dDims {
    pub(crate) fn new(x: &[usize], w: &[usize], stride: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || x[2] < w[2] || x[3] < w[3] || stride == 0
        {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(Conv2dDims {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            ho: (x[2] - w[2]) / stride + 1,
            wo: (x[3] - w[3]) / stride + 1,
        })
    }

    fn x_at(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.c_in + c) * self.h + i) * self.w + j
    }

    fn w_at(&self, o: usize, c: usize, i: usize, j: usize) -> usize {
        ((o * self.c_in + c) * self.kh + i) * self.kw + j
    }

    fn y_at(&self, b: usize, o: usize, i: usize, j: usize) -> usize {
        ((b * self.c_out + o) * self.ho + i) * self.wo + j
    }
}

fn conv2d_forward(d: &Conv2dDims, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d.batch * d.c_out * d.ho * d.wo];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            for c in 0..d.c_in {
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let wv = w[d.w_at(o, c, ki, kj)];
                        for i in 0..d.ho {
                            let xrow = d.x_at(b, c, i * d.stride + ki, kj);
                            let yrow = d.y_at(b, o, i, 0);
                            for j in 0..d.wo {
                                y[yrow + j] += wv * x[xrow + j * d.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv2d_grad_input(d: &Conv2dDims, w: &[f64], g: &[f64], gx: &mut [f64]) {
    for b in 0..d.batch {
        for o in 0..d.c_out {
            for c in 0..d.c_in {
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let wv = w[d.w_at(o, c, ki, kj)];
                        for i in 0..d.ho {
                            let xrow = d.x_at(b, c, i * d.stride + ki, kj);
                            let yrow = d.y_at(b, o, i, 0);
                            for j in 0..d.wo {
                                gx[xrow + j * d.stride] += wv * g[yrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_weight(d: &Conv2dDims, x: &[f64], g: &[f64], gw: &mut [f64]) {
    for b in 0..d.batch {
        for o in 0..d.c_out {
            for c in 0..d.c_in {
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let mut s = 0.0;
                        for i in 0..d.ho {
                            let xrow = d.x_at(b, c, i * d.stride + ki, kj);
                            let yrow = d.y_at(b, o, i, 0);
                            for j in 0..d.wo {
                                s += x[xrow + j * d.stride] * g[yrow + j];
                            }
                        }
                        gw[d.w_at(o, c, ki, kj)] += s;
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "operands on different tapes");
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let data = if a.shape() == b.shape() {
            let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), out)
        } else {
            let shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
            let sa = broadcast_strides(a.shape(), &shape);
            let sb = broadcast_strides(b.shape(), &shape);
            let mut out = vec![0.0; shape.iter().product()];
            let (av, bv) = (a.data(), b.data());
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            Tensor::from_parts(shape, out)
        };
        Ok(self.tape.push(data, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| c * x);
        self.tape.push(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.push(v, Op::AddScalar(self.id), &[self.id])
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let d = matmul_dims(a.shape(), b.shape())?;
        let (m, k, n) = (d.m, d.k, d.n);
        let count: usize = d.batch.iter().product();
        let mut out = vec![0.0; count * m * n];
        let (av, bv) = (a.data(), b.data());
        for_each_broadcast(&d.batch, &d.a_strides, &d.b_strides, |o, ia, ib| {
            let am = &av[ia * m * k..(ia + 1) * m * k];
            let bm = &bv[ib * k * n..(ib + 1) * k * n];
            let cm = &mut out[o * m * n..(o + 1) * m * n];
            for i in 0..m {
                let crow = &mut cm[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = am[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    for (c, &bkj) in crow.iter_mut().zip(&bm[kk * n..(kk + 1) * n]) {
                        *c += aik * bkj;
                    }
                }
            }
        });
        let mut shape = d.batch.clone();
        shape.extend([m, n]);
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, out), Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let rank = a.rank();
        let mut seen = vec![false; rank];
        for &ax in axes {
            if ax >= rank || seen[ax] {
                return Err(Error::Axis {
                    op: "permute",
                    axis: ax,
                    rank,
                });
            }
            seen[ax] = true;
        }
        if axes.len() != rank {
            return Err(Error::shape("permute", a.shape(), axes));
        }
        let in_strides = contiguous_strides(a.shape());
        let shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
        let sa: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let zeros = vec![0; rank];
        let mut out = vec![0.0; a.numel()];
        let av = a.data();
        for_each_broadcast(&shape, &sa, &zeros, |o, ia, _| out[o] = av[ia]);
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Permute(self.id, axes.to_vec()),
            &[self.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape.to_vec())?;
        Ok(self.tape.push(v, Op::Reshape(self.id), &[self.id]))
    }

    fn reduce(self, kind: ReduceKind, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let a = self.value();
        let rank = a.rank();
        let mut kept = a.shape().to_vec();
        for &ax in axes {
            if ax >= rank {
                return Err(Error::Axis {
                    op: "reduce",
                    axis: ax,
                    rank,
                });
            }
            kept[ax] = 1;
        }
        let n_out: usize = kept.iter().product();
        let si = contiguous_strides(a.shape());
        let so = broadcast_strides(&kept, a.shape());
        let av = a.data();
        let mut out = vec![
            match kind {
                ReduceKind::Max => f64::NEG_INFINITY,
                _ => 0.0,
            };
            n_out
        ];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for_each_broadcast(a.shape(), &si, &so, |i, _, o| out[o] += av[i]);
                if kind == ReduceKind::Mean {
                    let count = (a.numel() / n_out) as f64;
                    out.iter_mut().for_each(|x| *x /= count);
                }
            }
            ReduceKind::Max => {
                argmax = vec![usize::MAX; n_out];
                // first occurrence wins ties
                for_each_broadcast(a.shape(), &si, &so, |i, _, o| {
                    if argmax[o] == usize::MAX || av[i] > out[o] {
                        out[o] = av[i];
                        argmax[o] = i;
                    }
                });
            }
        }
        let shape = if keepdim {
            kept.clone()
        } else {
            (0..rank)
                .filter(|ax| !axes.contains(ax))
                .map(|ax| a.shape()[ax])
                .collect()
        };
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Reduce {
                input: self.id,
                kind,
                kept,
                argmax,
            },
            &[self.id],
        ))
    }

    pub fn sum(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, axes, keepdim)
    }

    pub fn mean(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, axes, keepdim)
    }

    pub fn max(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Max, axes, keepdim)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &axes, false)
            .expect("all axes are in range")
    }

    fn unary(self, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, Op::Unary(self.id, kind), &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid, sigmoid)
    }

    pub fn swish(self) -> Var<'t> {
        self.unary(UnaryKind::Swish, |x| x * sigmoid(x))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh, f64::tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp, f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryKind::Ln, f64::ln)
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: a.rank(),
            });
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let av = a.data();
        let mut out = vec![0.0; a.numel()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let m = (0..n).map(|i| av[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|i| (av[at(i)] - m).exp()).sum();
                let lz = z.ln();
                for i in 0..n {
                    out[at(i)] = if log {
                        av[at(i)] - m - lz
                    } else {
                        (av[at(i)] - m).exp() / z
                    };
                }
            }
        }
        let op = if log {
            Op::LogSoftmax(self.id, axis)
        } else {
            Op::Softmax(self.id, axis)
        };
        Ok(self
            .tape
            .push(Tensor::from_parts(a.shape().to_vec(), out), op, &[self.id]))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    /// Standardizes each row of the last axis: `(x - mean) / sqrt(var + eps)`.
    pub fn normalize_last(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let d = *a.shape().last().expect("normalize needs rank >= 1");
        let rows = a.numel() / d;
        let av = a.data();
        let mut out = vec![0.0; a.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &av[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                out[r * d + i] = (row[i] - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Normalize {
                input: self.id,
                inv_std,
            },
            &[self.id],
        )
    }

    /// Flat gather: output element `i` is `input[index[i]]`, or `fill` for `None`.
    pub fn gather(
        self,
        index: Arc<Vec<Option<usize>>>,
        fill: f64,
        shape: &[usize],
    ) -> Result<Var<'t>> {
        let a = self.value();
        if shape.iter().product::<usize>() != index.len() || shape.contains(&0) {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let av = a.data();
        let mut out = Vec::with_capacity(index.len());
        for src in index.iter() {
            match *src {
                Some(s) if s >= av.len() => {
                    return Err(Error::Index {
                        what: "gather".into(),
                        index: s,
                        bound: av.len(),
                    })
                }
                Some(s) => out.push(av[s]),
                None => out.push(fill),
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Gather {
                input: self.id,
                index,
            },
            &[self.id],
        ))
    }

    /// Replaces elements where the (broadcastable) mask is true.
    pub fn masked_fill(self, mask: &Mask, value: f64) -> Result<Var<'t>> {
        let a = self.value();
        let full = mask.expand_to(a.shape())?;
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(full.iter())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::MaskedFill {
                input: self.id,
                mask: Arc::new(full),
            },
            &[self.id],
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::Axis {
                op: "narrow",
                axis,
                rank: a.rank(),
            });
        }
        if len == 0 || start + len > a.shape()[axis] {
            return Err(Error::Index {
                what: format!("narrow of axis {axis} (len {len})"),
                index: start,
                bound: a.shape()[axis],
            });
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let av = a.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&av[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// `log(exp(a) + exp(b))` elementwise, same shapes.
    pub fn log_add_exp(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("log_add_exp", a.shape(), b.shape()));
        }
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let m = x.max(y);
                m + ((x - m).exp() + (y - m).exp()).ln()
            })
            .collect();
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::LogAddExp(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// Valid (unpadded) 2-D convolution of `[B, C_in, H, W]` with
    /// `[C_out, C_in, kh, kw]`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let d = Conv2dDims::new(x.shape(), w.shape(), stride)?;
        let y = conv2d_forward(&d, x.data(), w.data());
        Ok(self.tape.push(
            Tensor::from_parts(vec![d.batch, d.c_out, d.ho, d.wo], y),
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                stride,
            },
            &[self.id, weight.id],
        ))
    }

    /// Per-channel convolution along time of `[B, T, C]` with kernel `[C, k]`,
    /// zero "same" padding; `k` must be odd.
    pub fn depthwise_conv1d(self, weight: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 3 || w.rank() != 2 || w.shape()[0] != x.shape()[2] {
            return Err(Error::shape("depthwise_conv1d", x.shape(), w.shape()));
        }
        let k = w.shape()[1];
        if k % 2 == 0 {
            return Err(Error::Invalid(format!(
                "depthwise_conv1d kernel size must be odd, got {k}"
            )));
        }
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let pad = (k - 1) / 2;
        let (xv, wv) = (x.data(), w.data());
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                let orow = (bi * t + ti) * c;
                for j in 0..k {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let irow = (bi * t + src as usize) * c;
                    for ci in 0..c {
                        out[orow + ci] += wv[ci * k + j] * xv[irow + ci];
                    }
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::DepthwiseConv1d {
                input: self.id,
                weight: weight.id,
            },
            &[self.id, weight.id],
        ))
    }
}

impl Tape {
    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?
            .value();
        if axis >= first.rank() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: first.rank(),
            });
        }
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let ok = v.rank() == first.rank()
                && (0..first.rank()).all(|ax| ax == axis || v.shape()[ax] == first.shape()[ax]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), v.shape()));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }
}

/// Boolean mask (true = masked) broadcastable against a tensor shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("mask", &shape, &[data.len()]));
        }
        Ok(Mask { shape, data })
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> bool) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let strides = contiguous_strides(&shape);
        let mut idx = vec![0; shape.len()];
        let data = (0..n)
            .map(|flat| {
                for (ax, s) in strides.iter().enumerate() {
                    idx[ax] = (flat / s) % shape[ax];
                }
                f(&idx)
            })
            .collect();
        Mask { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, index: &[usize]) -> bool {
        self.data[super::flat_index(&self.shape, index)]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Mask> {
        Mask::new(shape, self.data.clone())
    }

    pub(crate) fn expand_to(&self, target: &[usize]) -> Result<Vec<bool>> {
        match broadcast_shape(&self.shape, target) {
            Some(s) if s == target => {}
            _ => return Err(Error::shape("mask", &self.shape, target)),
        }
        if self.shape == target {
            return Ok(self.data.clone());
        }
        let sm = broadcast_strides(&self.shape, target);
        let zeros = vec![0; target.len()];
        let mut out = vec![false; target.iter().product()];
        for_each_broadcast(target, &sm, &zeros, |o, im, _| out[o] = self.data[im]);
        Ok(out)
    }
}
