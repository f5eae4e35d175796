use std::cell::RefCell;
use std::sync::Arc;

use super::{
    broadcast_strides, contiguous_strides, for_each_broadcast, ParamId, ParamStore, Tensor,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Swish,
    Tanh,
    Exp,
    Ln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Recorded operation; operand fields are node ids on the same tape.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Reduce {
        input: usize,
        kind: ReduceKind,
        kept: Vec<usize>,
        argmax: Vec<usize>,
    },
    Unary(usize, UnaryKind),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Normalize {
        input: usize,
        inv_std: Vec<f64>,
    },
    Gather {
        input: usize,
        index: Arc<Vec<Option<usize>>>,
    },
    MaskedFill {
        input: usize,
        mask: Arc<Vec<bool>>,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        stride: usize,
    },
    DepthwiseConv1d {
        input: usize,
        weight: usize,
    },
    LogAddExp(usize, usize),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// Records operations in creation order; node ids are positions in that
/// order, so the recording is acyclic by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false, None)
    }

    /// A leaf bound to a stored parameter; its gradient can be folded back
    /// into the store with [`Gradients::accumulate_into`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push_leaf(store.value(id).clone(), true, Some(id))
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Smallest `|x|` over all relu inputs recorded so far (infinite when
    /// there are none): how far the recorded point is from a kink.
    pub fn relu_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut margin = f64::INFINITY;
        for n in nodes.iter() {
            if let Op::Unary(input, UnaryKind::Relu) = n.op {
                for x in nodes[input].value.data() {
                    margin = margin.min(x.abs());
                }
            }
        }
        margin
    }

    /// Reverse sweep from a scalar root. Each node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        if root_node.requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let entries = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| GradEntry {
                shape: n.value.shape().to_vec(),
                param: n.param,
                leaf: n.requires_grad && matches!(n.op, Op::Leaf),
                grad: grads.get_mut(i).and_then(Option::take),
            })
            .collect();
        Ok(Gradients { entries })
    }
}

#[derive(Debug)]
struct GradEntry {
    shape: Vec<usize>,
    param: Option<ParamId>,
    leaf: bool,
    grad: Option<Vec<f64>>,
}

/// Gradients of a scalar root with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    entries: Vec<GradEntry>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let e = &self.entries[var.id];
        match &e.grad {
            Some(g) => Tensor::from_parts(e.shape.clone(), g.clone()),
            None => Tensor::zeros(e.shape.clone()),
        }
    }

    /// Adds parameter-leaf gradients into the store (no zeroing).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for e in &self.entries {
            if let (true, Some(id), Some(g)) = (e.leaf, e.param, &e.grad) {
                for (dst, src) in store.grad_mut(id).iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }
}

fn acc<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let sa = broadcast_strides(nodes[a].value.shape(), out.shape());
            let sb = broadcast_strides(nodes[b].value.shape(), out.shape());
            if let Some(ga) = acc(nodes, grads, a) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, _| ga[ia] += g[o]);
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, _, ib| gb[ib] += sign * g[o]);
            }
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
            let sa = broadcast_strides(nodes[a].value.shape(), out.shape());
            let sb = broadcast_strides(nodes[b].value.shape(), out.shape());
            if let Some(ga) = acc(nodes, grads, a) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| ga[ia] += g[o] * vb[ib]);
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| gb[ib] += g[o] * va[ia]);
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        &Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a].value, &nodes[b].value);
            let dims = super::ops::matmul_dims(ta.shape(), tb.shape()).expect("checked in forward");
            let (m, k, n) = (dims.m, dims.k, dims.n);
            if let Some(ga) = acc(nodes, grads, a) {
                let bv = tb.data();
                for_each_broadcast(&dims.batch, &dims.a_strides, &dims.b_strides, |o, ia, ib| {
                    let gm = &g[o * m * n..(o + 1) * m * n];
                    let bm = &bv[ib * k * n..(ib + 1) * k * n];
                    let gam = &mut ga[ia * m * k..(ia + 1) * m * k];
                    for i in 0..m {
                        let grow = &gm[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bm[kk * n..(kk + 1) * n];
                            gam[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
            }
            if let Some(gb) = acc(nodes, grads, b) {
                let av = ta.data();
                for_each_broadcast(&dims.batch, &dims.a_strides, &dims.b_strides, |o, ia, ib| {
                    let gm = &g[o * m * n..(o + 1) * m * n];
                    let am = &av[ia * m * k..(ia + 1) * m * k];
                    let gbm = &mut gb[ib * k * n..(ib + 1) * k * n];
                    for i in 0..m {
                        let grow = &gm[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = am[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for (d, s) in gbm[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *d += aik * s;
                            }
                        }
                    }
                });
            }
        }
        Op::Permute(a, axes) => {
            let a = *a;
            if let Some(ga) = acc(nodes, grads, a) {
                let in_strides = contiguous_strides(nodes[a].value.shape());
                let sa: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
                let zeros = vec![0; axes.len()];
                for_each_broadcast(out.shape(), &sa, &zeros, |o, ia, _| ga[ia] += g[o]);
            }
        }
        Op::Reduce {
            input,
            kind,
            kept,
            argmax,
        } => {
            let a = *input;
            let in_shape = nodes[a].value.shape().to_vec();
            if let Some(ga) = acc(nodes, grads, a) {
                match kind {
                    ReduceKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            ga[src] += g[o];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let scale = if *kind == ReduceKind::Mean {
                            kept.iter().product::<usize>() as f64 / in_shape.iter().product::<usize>() as f64
                        } else {
                            1.0
                        };
                        let si = contiguous_strides(&in_shape);
                        let so = broadcast_strides(kept, &in_shape);
                        for_each_broadcast(&in_shape, &si, &so, |i, _, o| ga[i] += scale * g[o]);
                    }
                }
            }
        }
        &Op::Unary(a, kind) => {
            let x = nodes[a].value.data();
            let y = out.data();
            if let Some(ga) = acc(nodes, grads, a) {
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryKind::Swish => {
                            let s = super::ops::sigmoid(x[i]);
                            s * (1.0 + x[i] * (1.0 - s))
                        }
                        UnaryKind::Tanh => 1.0 - y[i] * y[i],
                        UnaryKind::Exp => y[i],
                        UnaryKind::Ln => 1.0 / x[i],
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        &Op::Softmax(a, axis) | &Op::LogSoftmax(a, axis) => {
            let log = matches!(nodes[id].op, Op::LogSoftmax(..));
            let shape = out.shape();
            let (outer, n, inner) = super::ops::axis_split(shape, axis);
            let y = out.data();
            if let Some(ga) = acc(nodes, grads, a) {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        if log {
                            let gsum: f64 = (0..n).map(|i| g[at(i)]).sum();
                            for i in 0..n {
                                ga[at(i)] += g[at(i)] - y[at(i)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..n {
                                ga[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
        }
        Op::Normalize { input, inv_std } => {
            let a = *input;
            let d = *out.shape().last().expect("rank >= 1");
            let y = out.data();
            if let Some(ga) = acc(nodes, grads, a) {
                for (r, &inv) in inv_std.iter().enumerate() {
                    let rg = &g[r * d..(r + 1) * d];
                    let ry = &y[r * d..(r + 1) * d];
                    let mean_g = rg.iter().sum::<f64>() / d as f64;
                    let mean_gy = rg.iter().zip(ry).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        ga[r * d + i] += inv * (rg[i] - mean_g - ry[i] * mean_gy);
                    }
                }
            }
        }
        Op::Gather { input, index } => {
            if let Some(ga) = acc(nodes, grads, *input) {
                for (o, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        ga[*s] += g[o];
                    }
                }
            }
        }
        Op::MaskedFill { input, mask } => {
            if let Some(ga) = acc(nodes, grads, *input) {
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        ga[i] += g[i];
                    }
                }
            }
        }
        &Op::Narrow { input, axis, start } => {
            let in_shape = nodes[input].value.shape().to_vec();
            let (outer, n_in, inner) = super::ops::axis_split(&in_shape, axis);
            let len = out.shape()[axis];
            if let Some(ga) = acc(nodes, grads, input) {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut ga[(o * n_in + start) * inner..(o * n_in + start + len) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, n_out, inner) = super::ops::axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                if let Some(gi) = acc(nodes, grads, inp) {
                    for o in 0..outer {
                        let src = &g[(o * n_out + offset) * inner..(o * n_out + offset + len) * inner];
                        let dst = &mut gi[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        &Op::Conv2d {
            input,
            weight,
            stride,
        } => {
            let (x, w) = (&nodes[input].value, &nodes[weight].value);
            let dims = super::ops::Conv2dDims::new(x.shape(), w.shape(), stride).expect("checked in forward");
            if let Some(gx) = acc(nodes, grads, input) {
                super::ops::conv2d_grad_input(&dims, w.data(), g, gx);
            }
            if let Some(gw) = acc(nodes, grads, weight) {
                super::ops::conv2d_grad_weight(&dims, x.data(), g, gw);
            }
        }
        &Op::DepthwiseConv1d { input, weight } => {
            let (x, w) = (&nodes[input].value, &nodes[weight].value);
            let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let k = w.shape()[1];
            let pad = (k - 1) / 2;
            let (xv, wv) = (x.data(), w.data());
            if let Some(gx) = acc(nodes, grads, input) {
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let (orow, irow) = ((bi * t + ti) * c, (bi * t + src as usize) * c);
                            for ci in 0..c {
                                gx[irow + ci] += g[orow + ci] * wv[ci * k + j];
                            }
                        }
                    }
                }
            }
            if let Some(gw) = acc(nodes, grads, weight) {
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let (orow, irow) = ((bi * t + ti) * c, (bi * t + src as usize) * c);
                            for ci in 0..c {
                                gw[ci * k + j] += g[orow + ci] * xv[irow + ci];
                            }
                        }
                    }
                }
            }
        }
        &Op::LogAddExp(a, b) => {
            let y = out.data();
            for src in [a, b] {
                let x = nodes[src].value.data().to_vec();
                if let Some(gs) = acc(nodes, grads, src) {
                    for i in 0..g.len() {
                        gs[i] += g[i] * (x[i] - y[i]).exp();
                    }
                }
            }
        }
    }
}
