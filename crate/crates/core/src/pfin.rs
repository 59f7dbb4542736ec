//! The probabilistic imputation network, its β-NLL objective, uncertainty
//! gating, cross-modal fusion, the multi-label classifier head, and the
//! deterministic baseline imputers.
//!
//! Parameter keys are grouped by prefix: `pfin.*` for the imputation
//! network, `fusion.*` for the cross-modal attention block, `cls.*` for the
//! classifier. The imputed-text path ([`fuse`]) and the real-text path
//! ([`fuse_multimodal`]) read the same `fusion.*` keys.
//!
//! Every operation exists at two levels: a graph builder taking [`NodeId`]s
//! (used for training) and a tensor-level convenience wrapper that builds a
//! throwaway graph with all parameters constant.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{self, Init};
use crate::params::{Bound, ParamSet};
use crate::special::sigmoid;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
const UNIT_NORM_TOL: f64 = 1e-6;

/// What to do when an input row is not unit-norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormCheck {
    Ignore,
    Warn,
    Error,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfinConfig {
    pub d: usize,
    pub n_labels: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub beta: f64,
    pub log_var_clamp: f64,
    pub fusion_heads: usize,
    pub norm_check: NormCheck,
}

impl Default for PfinConfig {
    fn default() -> Self {
        PfinConfig {
            d: 32,
            n_labels: 14,
            n_layers: 2,
            n_heads: 4,
            beta: 0.5,
            log_var_clamp: 10.0,
            fusion_heads: 1,
            norm_check: NormCheck::Warn,
        }
    }
}

impl PfinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.n_labels == 0 {
            return Err(Error::Config(format!("need d >= 2 and at least one label, got d={} C={}", self.d, self.n_labels)));
        }
        for (what, heads) in [("encoder", self.n_heads), ("fusion", self.fusion_heads)] {
            if heads == 0 || self.d % heads != 0 {
                return Err(Error::Config(format!("{what} heads {heads} do not divide d={}", self.d)));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.log_var_clamp > 0.0 && self.log_var_clamp.is_finite()) {
            return Err(Error::Config(format!("log-variance clamp must be positive, got {}", self.log_var_clamp)));
        }
        Ok(())
    }
}

/// Heteroscedastic Gaussian over the missing text feature.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationOutput {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl ImputationOutput {
    /// `σ² = exp(log_var)`.
    pub fn variance(&self) -> Tensor {
        self.log_var.map(libm::exp)
    }

    /// Mean of `σ²` over every sample and dimension.
    pub fn mean_variance(&self) -> f64 {
        self.log_var.data().iter().map(|&v| libm::exp(v)).sum::<f64>() / self.log_var.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub z_fused: Tensor,
    pub gate: Tensor,
}

/// Graph handles for an imputation forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ImputationNodes {
    pub mu: NodeId,
    pub log_var: NodeId,
}

/// Graph handles for a fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionNodes {
    pub z_fused: NodeId,
    /// `None` where the gate is identically one.
    pub gate: Option<NodeId>,
}

pub fn is_pfin_key(name: &str) -> bool {
    name.starts_with("pfin.")
}

/// Fresh parameters for the imputation network, fusion block, and classifier.
///
/// Weights are `N(0, 0.02²)`, biases zero, layer-norm gains one. The final
/// layers of both output heads are zero, so a fresh network predicts
/// `μ = 0`, `σ² = 1` everywhere.
pub fn init_params(cfg: &PfinConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.d;
    let normal = Init::Normal(INIT_STD);
    let mut p = ParamSet::new();

    nn::init_linear(&mut p, "pfin.in_proj", d, d, normal, rng)?;
    nn::init_layer_norm(&mut p, "pfin.in_ln", d)?;
    let mut query = Tensor::zeros(&[d]);
    let dist = rand_distr::Normal::new(0.0, INIT_STD).expect("finite std");
    query.data_mut().iter_mut().for_each(|v| *v = rng.sample(dist));
    p.insert("pfin.query", query)?;
    for l in 0..cfg.n_layers {
        let pre = format!("pfin.layer{l}");
        nn::init_layer_norm(&mut p, &format!("{pre}.ln1"), d)?;
        nn::init_attention(&mut p, &format!("{pre}.attn"), d, INIT_STD, rng)?;
        nn::init_layer_norm(&mut p, &format!("{pre}.ln2"), d)?;
        nn::init_linear(&mut p, &format!("{pre}.ff.fc1"), d, 4 * d, normal, rng)?;
        nn::init_linear(&mut p, &format!("{pre}.ff.fc2"), 4 * d, d, normal, rng)?;
    }
    nn::init_layer_norm(&mut p, "pfin.out_ln", d)?;
    for head in ["mu", "log_var"] {
        nn::init_linear(&mut p, &format!("pfin.{head}.fc1"), d, d, normal, rng)?;
        nn::init_linear(&mut p, &format!("pfin.{head}.fc2"), d, d, Init::Zeros, rng)?;
    }

    nn::init_attention(&mut p, "fusion.img_attn", d, INIT_STD, rng)?;
    nn::init_attention(&mut p, "fusion.txt_attn", d, INIT_STD, rng)?;
    nn::init_layer_norm(&mut p, "fusion.img_ln", d)?;
    nn::init_layer_norm(&mut p, "fusion.txt_ln", d)?;
    nn::init_linear(&mut p, "fusion.proj", 2 * d, d, normal, rng)?;

    nn::init_linear(&mut p, "cls.fc1", d, d, normal, rng)?;
    nn::init_linear(&mut p, "cls.fc2", d, cfg.n_labels, normal, rng)?;
    Ok(p)
}

fn check_unit_rows(x: &Tensor, policy: NormCheck) -> Result<()> {
    if policy == NormCheck::Ignore {
        return Ok(());
    }
    for r in 0..x.rows() {
        let n = libm::sqrt(x.row(r).iter().map(|v| v * v).sum::<f64>());
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            let msg = format!("image feature row {r} has norm {n}, expected 1");
            if policy == NormCheck::Error {
                return Err(Error::Contract(msg));
            }
            log::warn!("{msg}");
            return Ok(());
        }
    }
    Ok(())
}

/// Imputation network forward pass on `z_img` (`batch × d`).
///
/// `GELU(LayerNorm(Linear(z)))` forms the second token of a length-2
/// sequence led by a learned query; pre-norm transformer layers process
/// it and the query position feeds separate μ and log-variance MLPs.
pub fn pfin_forward(g: &mut Graph, p: &Bound, z_img: NodeId, cfg: &PfinConfig) -> Result<ImputationNodes> {
    check_unit_rows(g.value(z_img), cfg.norm_check)?;
    let shape = g.shape(z_img).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d {
        return Err(Error::dim("pfin_forward", &shape, &[shape[0], cfg.d]));
    }
    let (batch, d) = (shape[0], cfg.d);

    let h0 = nn::linear(g, p, "pfin.in_proj", z_img)?;
    let h0 = nn::layer_norm(g, p, "pfin.in_ln", h0)?;
    let h0 = g.gelu(h0);
    let h0 = g.reshape(h0, &[batch, 1, d])?;
    let q = g.expand(p.id("pfin.query")?, batch)?;
    let q = g.reshape(q, &[batch, 1, d])?;
    let mut x = g.concat(q, h0, 1)?;

    for l in 0..cfg.n_layers {
        let pre = format!("pfin.layer{l}");
        let h = nn::layer_norm(g, p, &format!("{pre}.ln1"), x)?;
        let (a, _) = nn::multi_head_attention(g, p, &format!("{pre}.attn"), h, h, h, cfg.n_heads)?;
        x = g.add(x, a)?;
        let h = nn::layer_norm(g, p, &format!("{pre}.ln2"), x)?;
        let f = nn::mlp(g, p, &format!("{pre}.ff"), h)?;
        x = g.add(x, f)?;
    }
    let x = nn::layer_norm(g, p, "pfin.out_ln", x)?;
    let summary = g.select(x, 1, 0)?;
    let mu = nn::mlp(g, p, "pfin.mu", summary)?;
    let raw = nn::mlp(g, p, "pfin.log_var", summary)?;
    let log_var = g.clamp(raw, -cfg.log_var_clamp, cfg.log_var_clamp);
    Ok(ImputationNodes { mu, log_var })
}

/// Tensor-level [`pfin_forward`].
pub fn impute(params: &ParamSet, z_img: &Tensor, cfg: &PfinConfig) -> Result<ImputationOutput> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let z = g.constant(z_img.clone());
    let out = pfin_forward(&mut g, &p, z, cfg)?;
    Ok(ImputationOutput {
        mu: g.value(out.mu).clone(),
        log_var: g.value(out.log_var).clone(),
    })
}

/// β-NLL: batch mean of `(1/d)·Σ_j SG(σ_j^{2β})·(½·log σ_j² + (z_j − μ_j)²/(2σ_j²))`.
///
/// The `½·log 2π` constant is omitted.
pub fn beta_nll_loss(g: &mut Graph, out: ImputationNodes, target: NodeId, beta: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    let diff = g.sub(target, out.mu)?;
    let sq = g.square(diff);
    let neg_lv = g.scale(out.log_var, -1.0);
    let precision = g.exp(neg_lv);
    let fit = g.mul(sq, precision)?;
    let both = g.add(out.log_var, fit)?;
    let nll = g.scale(both, 0.5);
    let weight_exp = g.scale(out.log_var, beta);
    let weight = g.exp(weight_exp);
    let weight = g.stop_gradient(weight);
    let weighted = g.mul(weight, nll)?;
    Ok(g.mean(weighted))
}

/// Tensor-level [`beta_nll_loss`].
pub fn beta_nll(out: &ImputationOutput, target: &Tensor, beta: f64) -> Result<f64> {
    if out.mu.shape() != target.shape() {
        return Err(Error::dim("beta_nll", out.mu.shape(), target.shape()));
    }
    let mut g = Graph::new();
    let nodes = ImputationNodes {
        mu: g.constant(out.mu.clone()),
        log_var: g.constant(out.log_var.clone()),
    };
    let t = g.constant(target.clone());
    let loss = beta_nll_loss(&mut g, nodes, t, beta)?;
    Ok(g.value(loss).item())
}

/// Mean squared error, the deterministic-imputer objective.
pub fn mse_loss(g: &mut Graph, mu: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = g.sub(target, mu)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// `sigmoid(−log σ²)` on the graph.
pub fn gate_node(g: &mut Graph, log_var: NodeId) -> NodeId {
    let neg = g.scale(log_var, -1.0);
    g.sigmoid(neg)
}

/// `sigmoid(−log σ²)` elementwise.
pub fn uncertainty_gate(log_var: &Tensor) -> Tensor {
    log_var.map(|v| sigmoid(-v))
}

/// Bidirectional cross-modal attention over one image feature and one text
/// feature per sample, followed by a joint projection.
///
/// Each sample is a length-1 sequence on both sides.
pub fn fuse_text(g: &mut Graph, p: &Bound, z_img: NodeId, text: NodeId, cfg: &PfinConfig) -> Result<NodeId> {
    let (ti, tt) = (g.shape(z_img).to_vec(), g.shape(text).to_vec());
    if ti != tt || ti.len() != 2 || ti[1] != cfg.d {
        return Err(Error::dim("fuse", &ti, &tt));
    }
    let (batch, d) = (ti[0], cfg.d);
    let img = g.reshape(z_img, &[batch, 1, d])?;
    let txt = g.reshape(text, &[batch, 1, d])?;

    let (a_img, _) = nn::multi_head_attention(g, p, "fusion.img_attn", img, txt, txt, cfg.fusion_heads)?;
    let a_img = g.reshape(a_img, &[batch, d])?;
    let img_res = g.add(z_img, a_img)?;
    let img_hat = nn::layer_norm(g, p, "fusion.img_ln", img_res)?;

    let (a_txt, _) = nn::multi_head_attention(g, p, "fusion.txt_attn", txt, img, img, cfg.fusion_heads)?;
    let a_txt = g.reshape(a_txt, &[batch, d])?;
    let txt_res = g.add(text, a_txt)?;
    let txt_hat = nn::layer_norm(g, p, "fusion.txt_ln", txt_res)?;

    let joint = g.concat(img_hat, txt_hat, 1)?;
    nn::linear(g, p, "fusion.proj", joint)
}

/// Gates the imputed mean by `sigmoid(−log σ²)` and fuses it with the image.
pub fn fuse(g: &mut Graph, p: &Bound, z_img: NodeId, out: ImputationNodes, cfg: &PfinConfig) -> Result<FusionNodes> {
    let gate = gate_node(g, out.log_var);
    let text = g.mul(gate, out.mu)?;
    let z_fused = fuse_text(g, p, z_img, text, cfg)?;
    Ok(FusionNodes {
        z_fused,
        gate: Some(gate),
    })
}

/// Fusion with an observed text feature; the gate is identically one.
pub fn fuse_multimodal(g: &mut Graph, p: &Bound, z_img: NodeId, z_txt: NodeId, cfg: &PfinConfig) -> Result<FusionNodes> {
    let z_fused = fuse_text(g, p, z_img, z_txt, cfg)?;
    Ok(FusionNodes { z_fused, gate: None })
}

/// Tensor-level [`fuse`].
pub fn fuse_eval(z_img: &Tensor, out: &ImputationOutput, params: &ParamSet, cfg: &PfinConfig) -> Result<FusionOutput> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let z = g.constant(z_img.clone());
    let nodes = ImputationNodes {
        mu: g.constant(out.mu.clone()),
        log_var: g.constant(out.log_var.clone()),
    };
    let f = fuse(&mut g, &p, z, nodes, cfg)?;
    Ok(FusionOutput {
        z_fused: g.value(f.z_fused).clone(),
        gate: g.value(f.gate.expect("gated path")).clone(),
    })
}

/// Tensor-level [`fuse_multimodal`]; an absent text feature is a contract error.
pub fn fuse_multimodal_eval(
    z_img: &Tensor,
    z_txt: Option<&Tensor>,
    params: &ParamSet,
    cfg: &PfinConfig,
) -> Result<FusionOutput> {
    let z_txt = z_txt.ok_or_else(|| Error::Contract("multimodal fusion requires a text feature".into()))?;
    fuse_plain(z_img, z_txt, params, cfg)
}

/// Fuses an arbitrary text-path tensor with the gate fixed to one.
pub fn fuse_plain(z_img: &Tensor, text: &Tensor, params: &ParamSet, cfg: &PfinConfig) -> Result<FusionOutput> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let z = g.constant(z_img.clone());
    let t = g.constant(text.clone());
    let f = fuse_multimodal(&mut g, &p, z, t, cfg)?;
    Ok(FusionOutput {
        z_fused: g.value(f.z_fused).clone(),
        gate: Tensor::ones(z_img.shape()),
    })
}

/// Linear → GELU → Linear to one logit per label.
pub fn classify(g: &mut Graph, p: &Bound, z_fused: NodeId) -> Result<NodeId> {
    nn::mlp(g, p, "cls", z_fused)
}

/// Tensor-level [`classify`].
pub fn classify_eval(z_fused: &Tensor, params: &ParamSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let z = g.constant(z_fused.clone());
    let logits = classify(&mut g, &p, z)?;
    Ok(g.value(logits).clone())
}

/// Mean binary cross-entropy of `logits` against `labels`.
pub fn classification_loss(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (l, y) = (g.constant(logits.clone()), g.constant(labels.clone()));
    let loss = g.bce_with_logits(l, y)?;
    Ok(g.value(loss).item())
}

/// Stand-ins for the missing text feature used by the baseline methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Zero,
    Uniform,
    DeterministicFin,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(BaselineKind::Zero),
            "uniform" => Ok(BaselineKind::Uniform),
            "deterministic_fin" => Ok(BaselineKind::DeterministicFin),
            other => Err(Error::Config(format!("unknown imputation baseline `{other}`"))),
        }
    }
}

/// Inputs a baseline may need.
#[derive(Clone, Copy, Debug)]
pub struct BaselineContext<'a> {
    pub params: &'a ParamSet,
    pub cfg: &'a PfinConfig,
    /// Server-side mean text embedding (required for [`BaselineKind::Uniform`]).
    pub global_mean: Option<&'a Tensor>,
}

/// Text-path tensor a baseline substitutes for `z_img`'s missing text.
pub fn impute_baseline(kind: BaselineKind, z_img: &Tensor, ctx: BaselineContext<'_>) -> Result<Tensor> {
    let batch = z_img.rows();
    let d = ctx.cfg.d;
    match kind {
        BaselineKind::Zero => Ok(Tensor::zeros(&[batch, d])),
        BaselineKind::Uniform => {
            let mean = ctx
                .global_mean
                .ok_or_else(|| Error::Config("uniform imputation needs the global mean embedding".into()))?;
            if mean.len() != d {
                return Err(Error::dim("impute_baseline", mean.shape(), &[d]));
            }
            let rows: Vec<&[f64]> = (0..batch).map(|_| mean.data()).collect();
            Tensor::from_rows(&rows)
        }
        BaselineKind::DeterministicFin => Ok(impute(ctx.params, z_img, ctx.cfg)?.mu),
    }
}

/// Mean of the given text features, weighted by how many each client holds.
pub fn global_mean_embedding<'a>(texts: impl IntoIterator<Item = &'a [f64]>, d: usize) -> Result<Tensor> {
    let mut acc = alloc::vec![0.0; d];
    let mut n = 0usize;
    for t in texts {
        if t.len() != d {
            return Err(Error::dim("global_mean_embedding", &[t.len()], &[d]));
        }
        acc.iter_mut().zip(t).for_each(|(a, &x)| *a += x);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Tensor::vector(acc)
}
