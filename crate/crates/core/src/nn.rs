//! Layer building blocks over a [`Graph`] with weights drawn from a [`ParamSet`].
//!
//! Weight matrices are stored `[in, out]` under `<prefix>.w` with bias
//! `<prefix>.b`; layer norms use `<prefix>.gain` / `<prefix>.bias`; attention
//! blocks own four linears `<prefix>.{q,k,v,o}`.

use alloc::format;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
}

fn draw(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Normal(std) => {
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
            t
        }
    }
}

pub fn init_linear(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut impl Rng,
) -> Result<()> {
    params.insert(format!("{prefix}.w"), draw(&[fan_in, fan_out], init, rng))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, d: usize) -> Result<()> {
    params.insert(format!("{prefix}.gain"), Tensor::ones(&[d]))?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))
}

pub fn init_attention(params: &mut ParamSet, prefix: &str, d: usize, std: f64, rng: &mut impl Rng) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.{proj}"), d, d, Init::Normal(std), rng)?;
    }
    Ok(())
}

pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = p.id(&format!("{prefix}.w"))?;
    let b = p.id(&format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let gain = p.id(&format!("{prefix}.gain"))?;
    let bias = p.id(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Linear → GELU → Linear.
pub fn mlp(g: &mut Graph, p: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

/// Projected multi-head attention; returns the output-projected node and
/// the raw attention node (whose weights [`Graph::attention_weights`] exposes).
pub fn multi_head_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
) -> Result<(NodeId, NodeId)> {
    let qp = linear(g, p, &format!("{prefix}.q"), q)?;
    let kp = linear(g, p, &format!("{prefix}.k"), k)?;
    let vp = linear(g, p, &format!("{prefix}.v"), v)?;
    let attn = g.attention(qp, kp, vp, heads)?;
    let out = linear(g, p, &format!("{prefix}.o"), attn)?;
    Ok((out, attn))
}

/// Evaluates [`multi_head_attention`] on plain tensors with the weights
/// stored under `prefix` in `weights`.
pub fn multi_head_attention_eval(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    weights: &ParamSet,
    prefix: &str,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = weights.bind(&mut g, |_| false);
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (out, _) = multi_head_attention(&mut g, &p, prefix, q, k, v, heads)?;
    Ok(g.value(out).clone())
}
