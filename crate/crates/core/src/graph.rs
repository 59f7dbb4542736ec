//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in insertion order, which is also a
//! valid topological order. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that (transitively) depends on a
//! variable leaf. Constants and everything downstream of
//! [`Graph::stop_gradient`] are untracked and receive no gradient.
//!
//! ```
//! use pfin_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
//! let sq = g.square(x);
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::special::{gelu, gelu_grad, sigmoid, softplus};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Square(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: NodeId,
        eps: f64,
        norms: Vec<f64>,
    },
    StopGradient,
    Sum(NodeId),
    Mean(NodeId),
    Concat {
        a: NodeId,
        b: NodeId,
        axis: usize,
    },
    Select {
        x: NodeId,
        axis: usize,
        index: usize,
    },
    Reshape(NodeId),
    Expand {
        x: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(x).map(f);
        let tracked = self.tracked(x);
        self.push(value, op, tracked)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    /// `x[…×k] · w[k×n] + b[n]`, applied over every leading index of `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.shape().len() != 2 || vx.cols() != vw.shape()[0] {
            return Err(Error::dim("linear", vx.shape(), vw.shape()));
        }
        let (m, k, n) = (vx.rows(), vw.shape()[0], vw.shape()[1]);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [n] {
                return Err(Error::dim("linear bias", vb.shape(), &[n]));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(vb.data());
            }
        }
        matmul_acc(vx.data(), vw.data(), &mut out, m, k, n);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("non-empty") = n;
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(value, Op::Linear { x, w, b }, tracked))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), libm::exp)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Identity forward; contributes no gradient backward.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Softmax over the last axis, shifted by the row max.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vx.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Softmax(x), tracked)
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.cols();
        if d < 2 {
            return Err(Error::Degenerate {
                op: "layer_norm",
                reason: alloc::format!("normalized axis has size {d}, need at least 2"),
            });
        }
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::dim("layer_norm affine", vg.shape(), &[d]));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// Divides each row (last axis) by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let d = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = vx.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let n = libm::sqrt(dot(row, row)).max(eps);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::L2Normalize { x, eps, norms }, tracked)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).mean();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::dim("concat", sa, sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let (ia, ib) = (va.len() / outer, vb.len() / outer);
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            out.extend_from_slice(&va.data()[o * ia..(o + 1) * ia]);
            out.extend_from_slice(&vb.data()[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Concat { a, b, axis }, tracked))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 2 || axis >= s.len() || index >= s[axis] {
            return Err(Error::dim("select", s, &[axis, index]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * s[axis] + index) * inner;
            out.extend_from_slice(&vx.data()[start..start + inner]);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Select { x, axis, index }, tracked))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Tiles `x` along a new leading axis of size `times`.
    pub fn expand(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let mut shape = vec![times];
        shape.extend_from_slice(vx.shape());
        let mut out = Vec::with_capacity(times * vx.len());
        for _ in 0..times {
            out.extend_from_slice(vx.data());
        }
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Expand { x }, tracked))
    }

    /// Scaled dot-product attention per head on already-projected inputs.
    ///
    /// `q` is `[B, Lq, d]` (or `[Lq, d]` for a single sequence), `k` and `v`
    /// are `[B, Lk, d]`. Each head sees a contiguous `d / heads` slice and
    /// scores are scaled by `1/√(d/heads)`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let geom = AttnGeom::new(vq.shape(), vk.shape(), vv.shape(), heads)?;
        let mut probs = vec![0.0; geom.batch * heads * geom.lq * geom.lk];
        let mut out = vec![0.0; vq.len()];
        let (d, dh) = (geom.d, geom.head_dim);
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut scores = vec![0.0; geom.lk];
        for b in 0..geom.batch {
            for h in 0..heads {
                for i in 0..geom.lq {
                    let qrow = &vq.data()[(b * geom.lq + i) * d + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &vk.data()[(b * geom.lk + j) * d + h * dh..][..dh];
                        *s = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(&mut scores);
                    let p_off = geom.prob_offset(b, h, i);
                    probs[p_off..p_off + geom.lk].copy_from_slice(&scores);
                    let orow = &mut out[(b * geom.lq + i) * d + h * dh..][..dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vrow = &vv.data()[(b * geom.lk + j) * d + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vq.shape().to_vec(), out)?;
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            tracked,
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// `[B, heads, Lq, Lk]`.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean binary cross-entropy with logits over every element.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (vl, vt) = (self.value(logits), self.value(targets));
        same_shape("bce_with_logits", vl, vt)?;
        let total: f64 = vl
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&x, &y)| softplus(x) - x * y)
            .sum();
        let value = Tensor::scalar(total / vl.len() as f64);
        let tracked = self.tracked(logits);
        Ok(self.push(value, Op::BceWithLogits { logits, targets }, tracked))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward requires a scalar loss, node {} has shape {:?}",
                loss.0,
                lv.shape()
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.tracked(loss) {
            slots[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = slots[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut slots);
            slots[idx] = Some(gout);
        }
        let slots = slots
            .into_iter()
            .zip(&self.nodes)
            .map(|(s, n)| s.map(|data| Tensor::new(n.value.shape().to_vec(), data).expect("grad shape")))
            .collect();
        Ok(Gradients { slots })
    }

    fn slot<'a>(&self, slots: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut [f64]> {
        if !self.tracked(id) {
            return None;
        }
        let len = self.value(id).len();
        Some(slots[id.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if let Some(ga) = self.slot(slots, *a) {
                    matmul_bt_acc(g, vb.data(), ga, m, k, n);
                }
                if let Some(gb) = self.slot(slots, *b) {
                    matmul_at_acc(va.data(), g, gb, m, k, n);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (m, k, n) = (vx.rows(), vw.shape()[0], vw.shape()[1]);
                if let Some(gx) = self.slot(slots, *x) {
                    matmul_bt_acc(g, vw.data(), gx, m, k, n);
                }
                if let Some(gw) = self.slot(slots, *w) {
                    matmul_at_acc(vx.data(), g, gw, m, k, n);
                }
                if let Some(gb) = b.and_then(|b| self.slot(slots, b)) {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(slots, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = self.slot(slots, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(slots, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = self.slot(slots, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(slots, *a) {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(slots, *b) {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(va) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(slots, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += c * v);
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.slot(slots, *x) {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(slots, *x) {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(slots, *x) {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Square(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(slots, *x) {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o += 2.0 * gv * xv;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(slots, *x) {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        if xv >= *lo && xv <= *hi {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                if let Some(gx) = self.slot(slots, *x) {
                    for ((grow, yrow), orow) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let inner = dot(grow, yrow);
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let vg = self.value(*gain).data();
                if let Some(gg) = self.slot(slots, *gain) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((o, &gv), &hv) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o += gv * hv;
                        }
                    }
                }
                if let Some(gb) = self.slot(slots, *bias) {
                    for grow in g.chunks_exact(d) {
                        gb.iter_mut().zip(grow).for_each(|(o, &v)| *o += v);
                    }
                }
                if let Some(gx) = self.slot(slots, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * vg[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, hrow) / d as f64;
                        let orow = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            orow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                let d = node.value.cols();
                if let Some(gx) = self.slot(slots, *x) {
                    for (r, ((grow, yrow), orow)) in
                        g.chunks_exact(d).zip(y.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).enumerate()
                    {
                        let n = norms[r];
                        // Below the floor the map is a fixed scaling by 1/eps.
                        let proj = if n > *eps { dot(grow, yrow) } else { 0.0 };
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += (gv - yv * proj) / n;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(slots, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(slots, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Concat { a, b, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let ia = self.value(*a).len() / outer;
                let ib = self.value(*b).len() / outer;
                if let Some(ga) = self.slot(slots, *a) {
                    for o in 0..outer {
                        let src = &g[o * (ia + ib)..][..ia];
                        ga[o * ia..(o + 1) * ia].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
                if let Some(gb) = self.slot(slots, *b) {
                    for o in 0..outer {
                        let src = &g[o * (ia + ib) + ia..][..ib];
                        gb[o * ib..(o + 1) * ib].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Select { x, axis, index } => {
                let s = self.value(*x).shape();
                let inner: usize = s[axis + 1..].iter().product();
                let span = s[*axis];
                if let Some(gx) = self.slot(slots, *x) {
                    for (o, chunk) in g.chunks_exact(inner).enumerate() {
                        let start = (o * span + index) * inner;
                        gx[start..start + inner].iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(slots, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Expand { x } => {
                if let Some(gx) = self.slot(slots, *x) {
                    let n = gx.len();
                    for chunk in g.chunks_exact(n) {
                        gx.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(g, *q, *k, *v, *heads, probs, slots),
            Op::BceWithLogits { logits, targets } => {
                let vl = self.value(*logits).data();
                let vt = self.value(*targets).data();
                if let Some(gl) = self.slot(slots, *logits) {
                    let s = g[0] / vl.len() as f64;
                    for ((o, &x), &t) in gl.iter_mut().zip(vl).zip(vt) {
                        *o += s * (sigmoid(x) - t);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: &[f64],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[f64],
        slots: &mut [Option<Vec<f64>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let geom = AttnGeom::new(vq.shape(), vk.shape(), vv.shape(), heads).expect("validated on forward");
        let (d, dh, lk) = (geom.d, geom.head_dim, geom.lk);
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut gq = vec![0.0; vq.len()];
        let mut gk = vec![0.0; vk.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; lk];
        for b in 0..geom.batch {
            for h in 0..heads {
                for i in 0..geom.lq {
                    let p = &probs[geom.prob_offset(b, h, i)..][..lk];
                    let q_off = (b * geom.lq + i) * d + h * dh;
                    let grow = &g[q_off..q_off + dh];
                    for j in 0..lk {
                        let v_off = (b * lk + j) * d + h * dh;
                        dp[j] = dot(grow, &vv.data()[v_off..v_off + dh]);
                        for c in 0..dh {
                            gv[v_off + c] += p[j] * grow[c];
                        }
                    }
                    let inner = dot(&dp, p);
                    for j in 0..lk {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let k_off = (b * lk + j) * d + h * dh;
                        for c in 0..dh {
                            gq[q_off + c] += ds * vk.data()[k_off + c];
                            gk[k_off + c] += ds * vq.data()[q_off + c];
                        }
                    }
                }
            }
        }
        for (id, grad) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.slot(slots, id) {
                slot.iter_mut().zip(&grad).for_each(|(o, &x)| *o += x);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

struct AttnGeom {
    batch: usize,
    lq: usize,
    lk: usize,
    d: usize,
    head_dim: usize,
    heads: usize,
}

impl AttnGeom {
    fn new(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<Self> {
        let split = |s: &[usize]| match s {
            [l, d] => Some((1, *l, *d)),
            [b, l, d] => Some((*b, *l, *d)),
            _ => None,
        };
        let (Some((bq, lq, d)), Some((bk, lk, dk)), Some((bv, lv, dv))) = (split(q), split(k), split(v)) else {
            return Err(Error::dim("attention", q, k));
        };
        if bq != bk || bk != bv || lk != lv || d != dk || d != dv {
            return Err(Error::dim("attention", q, k));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "model width {d} is not divisible by {heads} attention heads"
            )));
        }
        Ok(AttnGeom {
            batch: bq,
            lq,
            lk,
            d,
            head_dim: d / heads,
            heads,
        })
    }

    fn prob_offset(&self, b: usize, h: usize, i: usize) -> usize {
        ((b * self.heads + h) * self.lq + i) * self.lk
    }
}
