//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended to a [`Tape`] in evaluation order, so every parent has a
//! smaller id than its children and a single reverse sweep over the tape is a
//! valid topological traversal. Leaves created with [`Tape::leaf`] receive
//! gradients; constants and [`Tape::stop_gradient`] outputs never do.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use rayon::prelude::*;

use crate::error::{DuoError, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Entries of [`Tape::softmax`] are floored here before renormalization.
pub const PROB_FLOOR: f64 = 1e-12;

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Exp,
    Log,
    Sqrt,
    Abs,
    Sigmoid,
    Relu,
    Softplus,
    Square,
    Pow(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Binary { kind: BinKind, a: usize, b: usize },
    Affine { a: usize, scale: f64 },
    Unary { kind: UnKind, a: usize },
    Sum { a: usize },
    SumAxis { a: usize, axis: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Narrow { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    MatMul { a: usize, b: usize },
    Solve { a: usize, b: usize },
    Softmax { a: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Upsample { a: usize },
    AvgPool2 { a: usize },
    PadReplicate { a: usize, pad: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Batch statistics used by [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    /// Set when any propagated gradient holds a NaN or infinity.
    pub non_finite: bool,
    pub nodes_visited: usize,
}

/// Result of [`Tape::backward`]: one gradient per reachable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    pub diagnostics: Diagnostics,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    /// Gradient of `v`, or zeros of its shape when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(DuoError::contract(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` laid into `out_rank` dims, zero along broadcast dims.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_fwd(kind: UnKind, x: f64) -> f64 {
    match kind {
        UnKind::Exp => x.exp(),
        UnKind::Log => x.ln(),
        UnKind::Sqrt => x.sqrt(),
        UnKind::Abs => x.abs(),
        UnKind::Sigmoid => sigmoid(x),
        UnKind::Relu => x.max(0.0),
        UnKind::Softplus => softplus(x),
        UnKind::Square => x * x,
        UnKind::Pow(k) => x.powf(k),
    }
}

/// Local derivative given input `x` and output `y`.
fn unary_deriv(kind: UnKind, x: f64, y: f64) -> f64 {
    match kind {
        UnKind::Exp => y,
        UnKind::Log => 1.0 / x,
        UnKind::Sqrt => 0.5 / y,
        // subgradient 0 at the kink
        UnKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnKind::Sigmoid => y * (1.0 - y),
        UnKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnKind::Softplus => sigmoid(x),
        UnKind::Square => 2.0 * x,
        UnKind::Pow(k) => {
            if k == 0.0 {
                0.0
            } else {
                k * x.powf(k - 1.0)
            }
        }
    }
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source index for every element of the permuted tensor.
fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = contiguous_strides(shape);
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut map = Vec::with_capacity(shape.iter().product());
    for_each_broadcast(&out_shape, &strides, &strides, |_, ia, _| map.push(ia));
    (out_shape, map)
}

/// Bilinear sample positions: for each output index, (i0, i1, frac).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn split_last2(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(DuoError::contract(format!("need at least rank 2, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Constant, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Same value as `v`, but no gradient flows back through it.
    pub fn stop_gradient<'t>(&'t self, v: Var<'t>) -> Var<'t> {
        let t = v.value();
        self.push(t, Op::Constant, false)
    }

    fn binary<'t>(&'t self, kind: BinKind, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            let f = |x: f64, y: f64| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            if ta.shape() == tb.shape() {
                ta.zip_map(tb, f)
            } else {
                let out = broadcast_shape(ta.shape(), tb.shape())?;
                let sa = broadcast_strides(ta.shape(), &out);
                let sb = broadcast_strides(tb.shape(), &out);
                let mut data = vec![0.0; out.iter().product()];
                let (da, db) = (ta.data(), tb.data());
                for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
                Tensor::from_parts(out, data)
            }
        };
        Ok(self.push(value, Op::Binary { kind, a: a.id, b: b.id }, self.rg(&[a.id, b.id])))
    }

    fn unary<'t>(&'t self, kind: UnKind, a: Var<'t>) -> Var<'t> {
        let value = self.nodes.borrow()[a.id].value.map(|x| unary_fwd(kind, x));
        self.push(value, Op::Unary { kind, a: a.id }, self.rg(&[a.id]))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.is_scalar() {
            return Err(DuoError::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut out = Gradients::default();
        if !root_node.requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::full(root_node.value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            out.diagnostics.nodes_visited += 1;
            if !g.all_finite() {
                out.diagnostics.non_finite = true;
            }
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                out.grads.insert(id, g);
                continue;
            }
            for (pid, pg) in local_grads(&nodes, node, &g)? {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => {
                        for (x, y) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *x += y;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    /// Row-wise softmax over the last axis, floored at [`PROB_FLOOR`] and renormalized.
    pub fn softmax<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            let c = *t.shape().last().expect("softmax of a scalar");
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(c) {
                softmax_in_place(row);
            }
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        self.push(value, Op::Softmax { a: a.id }, self.rg(&[a.id]))
    }

    /// Solves `A x = b`. `A` is `[n, n]` or `[B, n, n]`; `b` is `[n]` or `[B, n]`.
    pub fn solve<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            let n = *tb.shape().last().ok_or_else(|| DuoError::contract("solve rhs is a scalar"))?;
            let batch = tb.len() / n;
            let a_ok = match ta.shape() {
                [r, c] => *r == n && *c == n && batch == 1,
                [bb, r, c] => *bb == batch && *r == n && *c == n && tb.rank() == 2,
                _ => false,
            };
            if !a_ok {
                return Err(DuoError::contract(format!(
                    "solve shapes {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let mut x = Vec::with_capacity(tb.len());
            for k in 0..batch {
                x.extend(linalg::solve_dense(
                    &ta.data()[k * n * n..(k + 1) * n * n],
                    &tb.data()[k * n..(k + 1) * n],
                    n,
                )?);
            }
            Tensor::from_parts(tb.shape().to_vec(), x)
        };
        Ok(self.push(value, Op::Solve { a: a.id, b: b.id }, self.rg(&[a.id, b.id])))
    }

    pub fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.matmul(&nodes[b.id].value)?
        };
        Ok(self.push(value, Op::MatMul { a: a.id, b: b.id }, self.rg(&[a.id, b.id])))
    }

    /// 2-D cross-correlation with zero padding: `x [N,C,H,W]`, `w [O,C,kh,kw]`, `b [O]`.
    pub fn conv2d<'t>(
        &'t self,
        x: Var<'t>,
        w: Var<'t>,
        b: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.id].value, &nodes[w.id].value);
            let tb = b.map(|b| &nodes[b.id].value);
            conv2d_forward(tx, tw, tb, stride, pad)?
        };
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Conv2d { x: x.id, w: w.id, b: b.map(|b| b.id), stride, pad }, rg))
    }

    /// Per-channel normalization of `x [N,C,H,W]` followed by the affine `gamma`, `beta`.
    /// Returns the output and, in batch mode, the batch `(mean, biased var)`.
    pub fn batch_norm<'t>(
        &'t self,
        x: Var<'t>,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: NormStats<'_>,
    ) -> Result<(Var<'t>, Option<(Vec<f64>, Vec<f64>)>)> {
        let (value, mean, inv_std, batch) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.id].value;
            let [n, c, h, w] = *tx.shape() else {
                return Err(DuoError::contract(format!("batch_norm input shape {:?}", tx.shape())));
            };
            let (tg, tbeta) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            if tg.len() != c || tbeta.len() != c {
                return Err(DuoError::contract("batch_norm affine size mismatch"));
            }
            let hw = h * w;
            let (mean, var, batch) = match stats {
                NormStats::Batch => {
                    let m = (n * hw) as f64;
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for ch in 0..c {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += tx.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                        }
                        let mu = s / m;
                        let mut v = 0.0;
                        for i in 0..n {
                            v += tx.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                                .iter()
                                .map(|x| (x - mu) * (x - mu))
                                .sum::<f64>();
                        }
                        mean[ch] = mu;
                        var[ch] = v / m;
                    }
                    (mean, var, true)
                }
                NormStats::Fixed { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(DuoError::contract("running statistics size mismatch"));
                    }
                    (mean.to_vec(), var.to_vec(), false)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut out = tx.data().to_vec();
            for i in 0..n {
                for ch in 0..c {
                    let (g, bb, mu, is) = (tg.data()[ch], tbeta.data()[ch], mean[ch], inv_std[ch]);
                    for v in &mut out[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        *v = g * (*v - mu) * is + bb;
                    }
                }
            }
            (Tensor::from_parts(tx.shape().to_vec(), out), mean, inv_std, batch.then_some(var))
        };
        let rg = self.rg(&[x.id, gamma.id, beta.id]);
        let stats_out = batch.map(|var| (mean.clone(), var));
        let v = self.push(
            value,
            Op::BatchNorm { x: x.id, gamma: gamma.id, beta: beta.id, mean, inv_std, batch_stats: stats_out.is_some() },
            rg,
        );
        Ok((v, stats_out))
    }

    /// Bilinear resize of the last two dims (half-pixel centers, edge clamp).
    pub fn upsample_bilinear<'t>(&'t self, a: Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            upsample_forward(&nodes[a.id].value, out_h, out_w)?
        };
        Ok(self.push(value, Op::Upsample { a: a.id }, self.rg(&[a.id])))
    }

    /// 2x2 mean pooling with stride 2 over the last two dims.
    pub fn avg_pool2<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            let (b, h, w) = split_last2(t.shape())?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(DuoError::contract("avg_pool2 needs even spatial dims"));
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut out = vec![0.0; b * ho * wo];
            for k in 0..b {
                let src = &t.data()[k * h * w..(k + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        out[k * ho * wo + i * wo + j] = 0.25
                            * (src[2 * i * w + 2 * j]
                                + src[2 * i * w + 2 * j + 1]
                                + src[(2 * i + 1) * w + 2 * j]
                                + src[(2 * i + 1) * w + 2 * j + 1]);
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = ho;
            shape[r - 1] = wo;
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, Op::AvgPool2 { a: a.id }, self.rg(&[a.id])))
    }

    /// Joins `parts` along `axis`; all other dims must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| DuoError::contract("concat of nothing"))?;
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(DuoError::contract(format!("concat axis {axis} on {base:?}")));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                    return Err(DuoError::contract(format!("concat shapes {base:?} and {s:?}")));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let len = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat { parts: ids, axis }, rg))
    }

    /// Pads the last two dims by repeating edge values.
    pub fn pad_replicate<'t>(&'t self, a: Var<'t>, pad: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            let (b, h, w) = split_last2(t.shape())?;
            let (hp, wp) = (h + 2 * pad, w + 2 * pad);
            let mut out = vec![0.0; b * hp * wp];
            for k in 0..b {
                for i in 0..hp {
                    let si = i.saturating_sub(pad).min(h - 1);
                    for j in 0..wp {
                        let sj = j.saturating_sub(pad).min(w - 1);
                        out[k * hp * wp + i * wp + j] = t.data()[k * h * w + si * w + sj];
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = hp;
            shape[r - 1] = wp;
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, Op::PadReplicate { a: a.id, pad }, self.rg(&[a.id])))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let mut s2 = 0.0;
    for v in row.iter_mut() {
        *v = (*v / s).max(PROB_FLOOR);
        s2 += *v;
    }
    for v in row.iter_mut() {
        *v /= s2;
    }
}

/// Softmax of a plain slice, with the same flooring as [`Tape::softmax`].
pub fn softmax_vec(h: &[f64]) -> Vec<f64> {
    let mut p = h.to_vec();
    softmax_in_place(&mut p);
    p
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

pub fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

fn conv_out_dim(i: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if i + 2 * pad < k || stride == 0 {
        return Err(DuoError::contract("conv kernel larger than padded input"));
    }
    Ok((i + 2 * pad - k) / stride + 1)
}

/// Unrolls one image `[C, H, W]` into `[C*kh*kw, ho*wo]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * kh * kw * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[((ci * kh + ki) * kw + kj) * ho * wo..][..ho * wo];
                for y in 0..ho {
                    let Some(iy) = (y * stride + ki).checked_sub(pad).filter(|&iy| iy < h) else { continue };
                    let row = &plane[iy * w..(iy + 1) * w];
                    let drow = &mut dst[y * wo..(y + 1) * wo];
                    for (xo, d) in drow.iter_mut().enumerate() {
                        if let Some(ix) = (xo * stride + kj).checked_sub(pad).filter(|&ix| ix < w) {
                            *d = row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch columns back onto an image `[C, H, W]`.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], out: &mut [f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) {
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[((ci * kh + ki) * kw + kj) * ho * wo..][..ho * wo];
                for y in 0..ho {
                    let Some(iy) = (y * stride + ki).checked_sub(pad).filter(|&iy| iy < h) else { continue };
                    for xo in 0..wo {
                        if let Some(ix) = (xo * stride + kj).checked_sub(pad).filter(|&ix| ix < w) {
                            plane[iy * w + ix] += src[y * wo + xo];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let ([n, c, h, wd], [o, c2, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(DuoError::contract(format!("conv2d shapes {:?} {:?}", x.shape(), w.shape())));
    };
    let (n, c, h, wd, o, kh, kw) = (*n, *c, *h, *wd, *o, *kh, *kw);
    if *c2 != c || b.is_some_and(|b| b.len() != o) {
        return Err(DuoError::contract("conv2d channel mismatch"));
    }
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(wd, kw, stride, pad)?;
    let (hw, k) = (ho * wo, c * kh * kw);
    let mut out = vec![0.0; n * o * hw];
    let (xd, wdat) = (x.data(), w.data());
    out.par_chunks_mut(o * hw).enumerate().for_each(|(ni, img)| {
        let cols = im2col(&xd[ni * c * h * wd..(ni + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, ho, wo);
        for (oi, plane) in img.chunks_mut(hw).enumerate() {
            let bias = b.map_or(0.0, |b| b.data()[oi]);
            plane.iter_mut().for_each(|v| *v = bias);
            for (kk, &wv) in wdat[oi * k..(oi + 1) * k].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (d, s) in plane.iter_mut().zip(&cols[kk * hw..(kk + 1) * hw]) {
                    *d += wv * s;
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, o, ho, wo], out))
}

fn upsample_forward(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, h, w) = split_last2(t.shape())?;
    if out_h < h || out_w < w {
        return Err(DuoError::contract(format!("upsample target {out_h}x{out_w} smaller than source {h}x{w}")));
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    if out_h == h && out_w == w {
        return Ok(Tensor::from_parts(shape, t.data().to_vec()));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; b * out_h * out_w];
    for k in 0..b {
        let src = &t.data()[k * h * w..(k + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[k * out_h * out_w + i * out_w + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Gradient contributions of one node to each of its parents.
fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].requires_grad;
    Ok(match &node.op {
        Op::Leaf | Op::Constant => vec![],
        Op::Binary { kind, a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let (da_f, db_f): (fn(f64, f64) -> f64, fn(f64, f64) -> f64) = match kind {
                BinKind::Add => (|_, _| 1.0, |_, _| 1.0),
                BinKind::Sub => (|_, _| 1.0, |_, _| -1.0),
                BinKind::Mul => (|_, y| y, |x, _| x),
                BinKind::Div => (|_, y| 1.0 / y, |x, y| -x / (y * y)),
            };
            let mut ga = vec![0.0; ta.len()];
            let mut gb = vec![0.0; tb.len()];
            let (xa, xb, gd) = (ta.data(), tb.data(), g.data());
            if ta.shape() == tb.shape() {
                for o in 0..gd.len() {
                    ga[o] = gd[o] * da_f(xa[o], xb[o]);
                    gb[o] = gd[o] * db_f(xa[o], xb[o]);
                }
            } else {
                let out = node.value.shape();
                let sa = broadcast_strides(ta.shape(), out);
                let sb = broadcast_strides(tb.shape(), out);
                for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
                    ga[ia] += gd[o] * da_f(xa[ia], xb[ib]);
                    gb[ib] += gd[o] * db_f(xa[ia], xb[ib]);
                });
            }
            vec![
                (*a, Tensor::from_parts(ta.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(tb.shape().to_vec(), gb)),
            ]
        }
        Op::Affine { a, scale } => vec![(*a, g.map(|x| x * scale))],
        Op::Unary { kind, a } => {
            let x = val(*a);
            let data = x
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * unary_deriv(*kind, xi, yi))
                .collect();
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::Sum { a } => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::SumAxis { a, axis } => {
            let shape = val(*a).shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[(o * len + l) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            vec![(*a, Tensor::from_parts(shape.to_vec(), data))]
        }
        Op::Reshape { a } => vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec()))],
        Op::Permute { a, perm } => {
            let shape = val(*a).shape();
            let (_, map) = permute_index(shape, perm);
            let mut data = vec![0.0; g.len()];
            for (o, &src) in map.iter().enumerate() {
                data[src] = g.data()[o];
            }
            vec![(*a, Tensor::from_parts(shape.to_vec(), data))]
        }
        Op::Narrow { a, axis, start } => {
            let shape = val(*a).shape();
            let outer: usize = shape[..*axis].iter().product();
            let full = shape[*axis];
            let len = node.value.shape()[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = vec![0.0; val(*a).len()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(*a, Tensor::from_parts(shape.to_vec(), data))]
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let full = out_shape[*axis];
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for &p in parts {
                let len = val(p).shape()[*axis];
                if needs(p) {
                    let mut data = Vec::with_capacity(val(p).len());
                    for o in 0..outer {
                        let s = (o * full + offset) * inner;
                        data.extend_from_slice(&g.data()[s..s + len * inner]);
                    }
                    res.push((p, Tensor::from_parts(val(p).shape().to_vec(), data)));
                }
                offset += len;
            }
            res
        }
        Op::GatherRows { a, idx } => {
            let shape = val(*a).shape();
            let row: usize = shape[1..].iter().product();
            let mut data = vec![0.0; val(*a).len()];
            for (k, &r) in idx.iter().enumerate() {
                for j in 0..row {
                    data[r * row + j] += g.data()[k * row + j];
                }
            }
            vec![(*a, Tensor::from_parts(shape.to_vec(), data))]
        }
        Op::MatMul { a, b } => {
            let mut v = vec![];
            if needs(*a) {
                v.push((*a, g.matmul(&val(*b).transpose()?)?));
            }
            if needs(*b) {
                v.push((*b, val(*a).transpose()?.matmul(g)?));
            }
            v
        }
        Op::Solve { a, b } => {
            let (ta, x) = (val(*a), &node.value);
            let n = *x.shape().last().unwrap();
            let batch = x.len() / n;
            let mut lam = Vec::with_capacity(x.len());
            for k in 0..batch {
                lam.extend(linalg::solve_dense_transposed(
                    &ta.data()[k * n * n..(k + 1) * n * n],
                    &g.data()[k * n..(k + 1) * n],
                    n,
                )?);
            }
            let mut v = vec![];
            if needs(*a) {
                let mut ga = vec![0.0; ta.len()];
                for k in 0..batch {
                    for i in 0..n {
                        for j in 0..n {
                            ga[k * n * n + i * n + j] = -lam[k * n + i] * x.data()[k * n + j];
                        }
                    }
                }
                v.push((*a, Tensor::from_parts(ta.shape().to_vec(), ga)));
            }
            v.push((*b, Tensor::from_parts(x.shape().to_vec(), lam)));
            v
        }
        Op::Softmax { a } => {
            let y = &node.value;
            let c = *y.shape().last().unwrap();
            let mut data = vec![0.0; y.len()];
            for ((gr, yr), dr) in g.data().chunks(c).zip(y.data().chunks(c)).zip(data.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    dr[k] = yr[k] * (gr[k] - dot);
                }
            }
            vec![(*a, Tensor::from_parts(y.shape().to_vec(), data))]
        }
        Op::Conv2d { x, w, b, stride, pad } => conv2d_backward(nodes, *x, *w, *b, *stride, *pad, g),
        Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
            let tx = val(*x);
            let [n, c, h, w] = *tx.shape() else { unreachable!() };
            let hw = h * w;
            let m = (n * hw) as f64;
            let gam = val(*gamma).data();
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut gx = vec![0.0; tx.len()];
            for ch in 0..c {
                let (mu, is) = (mean[ch], inv_std[ch]);
                let (mut sg, mut sgx) = (0.0, 0.0);
                for i in 0..n {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    for (&gv, &xv) in g.data()[r.clone()].iter().zip(&tx.data()[r]) {
                        sg += gv;
                        sgx += gv * (xv - mu) * is;
                    }
                }
                gbeta[ch] = sg;
                gg[ch] = sgx;
                for i in 0..n {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    for ((o, &gv), &xv) in gx[r.clone()].iter_mut().zip(&g.data()[r.clone()]).zip(&tx.data()[r]) {
                        *o = if *batch_stats {
                            let xhat = (xv - mu) * is;
                            gam[ch] * is / m * (m * gv - sg - xhat * sgx)
                        } else {
                            gam[ch] * is * gv
                        };
                    }
                }
            }
            vec![
                (*x, Tensor::from_parts(tx.shape().to_vec(), gx)),
                (*gamma, Tensor::from_parts(vec![c], gg)),
                (*beta, Tensor::from_parts(vec![c], gbeta)),
            ]
        }
        Op::Upsample { a } => {
            let t = val(*a);
            let (b, h, w) = split_last2(t.shape())?;
            let (_, oh, ow) = split_last2(node.value.shape())?;
            if oh == h && ow == w {
                return Ok(vec![(*a, Tensor::from_parts(t.shape().to_vec(), g.data().to_vec()))]);
            }
            let ty = bilinear_taps(h, oh);
            let tx = bilinear_taps(w, ow);
            let mut data = vec![0.0; t.len()];
            for k in 0..b {
                let dst = &mut data[k * h * w..(k + 1) * h * w];
                for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g.data()[k * oh * ow + i * ow + j];
                        dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![(*a, Tensor::from_parts(t.shape().to_vec(), data))]
        }
        Op::AvgPool2 { a } => {
            let t = val(*a);
            let (b, h, w) = split_last2(t.shape())?;
            let (ho, wo) = (h / 2, w / 2);
            let mut data = vec![0.0; t.len()];
            for k in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        data[k * h * w + i * w + j] = 0.25 * g.data()[k * ho * wo + (i / 2) * wo + j / 2];
                    }
                }
            }
            vec![(*a, Tensor::from_parts(t.shape().to_vec(), data))]
        }
        Op::PadReplicate { a, pad } => {
            let t = val(*a);
            let (b, h, w) = split_last2(t.shape())?;
            let (hp, wp) = (h + 2 * pad, w + 2 * pad);
            let mut data = vec![0.0; t.len()];
            for k in 0..b {
                for i in 0..hp {
                    let si = i.saturating_sub(*pad).min(h - 1);
                    for j in 0..wp {
                        let sj = j.saturating_sub(*pad).min(w - 1);
                        data[k * h * w + si * w + sj] += g.data()[k * hp * wp + i * wp + j];
                    }
                }
            }
            vec![(*a, Tensor::from_parts(t.shape().to_vec(), data))]
        }
    })
}

fn conv2d_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    g: &Tensor,
) -> Vec<(usize, Tensor)> {
    let (tx, tw) = (&nodes[x].value, &nodes[w].value);
    let [n, c, h, wd] = *tx.shape() else { unreachable!() };
    let [o, _, kh, kw] = *tw.shape() else { unreachable!() };
    let [_, _, ho, wo] = *g.shape() else { unreachable!() };
    let (hw, k) = (ho * wo, c * kh * kw);
    let (xd, wdat, gd) = (tx.data(), tw.data(), g.data());
    let mut out = vec![];
    if let Some(b) = b.filter(|&b| nodes[b].requires_grad) {
        let gb: Vec<f64> = (0..o)
            .map(|oi| (0..n).map(|ni| gd[(ni * o + oi) * hw..(ni * o + oi + 1) * hw].iter().sum::<f64>()).sum())
            .collect();
        out.push((b, Tensor::from_parts(vec![o], gb)));
    }
    let (need_w, need_x) = (nodes[w].requires_grad, nodes[x].requires_grad);
    if !need_w && !need_x {
        return out;
    }
    // per image: weight gradient contribution and input gradient
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let gimg = &gd[ni * o * hw..(ni + 1) * o * hw];
            let mut gw = Vec::new();
            if need_w {
                let cols = im2col(&xd[ni * c * h * wd..(ni + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, ho, wo);
                gw = vec![0.0; o * k];
                for oi in 0..o {
                    let gp = &gimg[oi * hw..(oi + 1) * hw];
                    for kk in 0..k {
                        gw[oi * k + kk] = gp.iter().zip(&cols[kk * hw..(kk + 1) * hw]).map(|(a, b)| a * b).sum();
                    }
                }
            }
            let mut gx = Vec::new();
            if need_x {
                let mut gcols = vec![0.0; k * hw];
                for oi in 0..o {
                    let gp = &gimg[oi * hw..(oi + 1) * hw];
                    for kk in 0..k {
                        let wv = wdat[oi * k + kk];
                        if wv == 0.0 {
                            continue;
                        }
                        for (d, s) in gcols[kk * hw..(kk + 1) * hw].iter_mut().zip(gp) {
                            *d += wv * s;
                        }
                    }
                }
                gx = vec![0.0; c * h * wd];
                col2im(&gcols, &mut gx, c, h, wd, kh, kw, stride, pad, ho, wo);
            }
            (gw, gx)
        })
        .collect();
    if need_w {
        let mut gw = vec![0.0; tw.len()];
        for (part, _) in &per_image {
            for (a, b) in gw.iter_mut().zip(part) {
                *a += b;
            }
        }
        out.push((w, Tensor::from_parts(tw.shape().to_vec(), gw)));
    }
    if need_x {
        let gx: Vec<f64> = per_image.into_iter().flat_map(|(_, gx)| gx).collect();
        out.push((x, Tensor::from_parts(tx.shape().to_vec(), gx)));
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the node value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn try_add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinKind::Add, self, o)
    }

    pub fn try_sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinKind::Sub, self, o)
    }

    pub fn try_mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinKind::Mul, self, o)
    }

    pub fn try_div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinKind::Div, self, o)
    }

    fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|x| x * scale + shift));
        let rg = self.requires_grad();
        self.tape.push(value, Op::Affine { a: self.id, scale }, rg)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.affine(1.0, c)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.affine(c, 0.0)
    }

    /// `c - self`.
    pub fn rsub_scalar(self, c: f64) -> Var<'t> {
        self.affine(-1.0, c)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(UnKind::Exp, self)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(UnKind::Log, self)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(UnKind::Sqrt, self)
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(UnKind::Abs, self)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(UnKind::Sigmoid, self)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(UnKind::Relu, self)
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(UnKind::Softplus, self)
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(UnKind::Square, self)
    }

    pub fn powf(self, k: f64) -> Var<'t> {
        self.tape.unary(UnKind::Pow(k), self)
    }

    pub fn sum(self) -> Var<'t> {
        let value = self.with_value(|t| Tensor::scalar(t.sum()));
        let rg = self.requires_grad();
        self.tape.push(value, Op::Sum { a: self.id }, rg)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(Tensor::len) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let value = self.with_value(|t| {
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(DuoError::contract(format!("sum_axis {axis} on shape {shape:?}")));
            }
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += t.data()[(o * len + l) * inner + i];
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            Ok(Tensor::from_parts(out_shape, data))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::SumAxis { a: self.id, axis }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.reshape(shape))?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape { a: self.id }, rg))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| {
            let mut check = perm.to_vec();
            check.sort_unstable();
            if check != (0..t.rank()).collect::<Vec<_>>() {
                return Err(DuoError::contract(format!("bad permutation {perm:?} for rank {}", t.rank())));
            }
            let (shape, map) = permute_index(t.shape(), perm);
            Ok(Tensor::from_parts(shape, map.iter().map(|&i| t.data()[i]).collect()))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Permute { a: self.id, perm: perm.to_vec() }, rg))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = self.with_value(|t| {
            let shape = t.shape();
            if axis >= shape.len() || start + len > shape[axis] || len == 0 {
                return Err(DuoError::contract(format!("narrow({axis},{start},{len}) on {shape:?}")));
            }
            let outer: usize = shape[..axis].iter().product();
            let full = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * full + start) * inner;
                data.extend_from_slice(&t.data()[s..s + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            Ok(Tensor::from_parts(out_shape, data))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Narrow { a: self.id, axis, start }, rg))
    }

    /// Selects rows (indices along axis 0); repeated indices are allowed.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| {
            let shape = t.shape();
            if shape.is_empty() || idx.is_empty() || idx.iter().any(|&i| i >= shape[0]) {
                return Err(DuoError::contract(format!("gather_rows out of range for {shape:?}")));
            }
            let row: usize = shape[1..].iter().product();
            let mut data = Vec::with_capacity(idx.len() * row);
            for &r in idx {
                data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[0] = idx.len();
            Ok(Tensor::from_parts(out_shape, data))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::GatherRows { a: self.id, idx: idx.to_vec() }, rg))
    }
}

macro_rules! impl_binop {
    ($tr:ident, $m:ident, $kind:expr) => {
        impl<'t> $tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, o: Var<'t>) -> Var<'t> {
                self.tape.binary($kind, self, o).expect("incompatible shapes")
            }
        }
    };
}
impl_binop!(Add, add, BinKind::Add);
impl_binop!(Sub, sub, BinKind::Sub);
impl_binop!(Mul, mul, BinKind::Mul);
impl_binop!(Div, div, BinKind::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.add_scalar(c)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.mul_scalar(c)
    }
}

/// Central-difference gradient `(f(x+s·eᵢ) − f(x−s·eᵢ)) / 2s` for each coordinate.
pub fn finite_difference(f: impl Fn(&Tensor) -> f64, at: &Tensor, step: f64) -> Result<Tensor> {
    if !(step > 0.0) {
        return Err(DuoError::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut x = at.clone();
    let mut out = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let fp = f(&x);
        x.data_mut()[i] = orig - step;
        let fm = f(&x);
        x.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DuoError::NonFiniteProbe { coordinate: i });
        }
        out[i] = (fp - fm) / (2.0 * step);
    }
    Ok(Tensor::from_parts(at.shape().to_vec(), out))
}

/// Max over coordinates of `|a − b| / max(|b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}
