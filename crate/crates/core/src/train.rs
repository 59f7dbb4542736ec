//! Minibatch training of the imputation network on paired features, plus
//! batched inference helpers shared with federated training.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::pfin::{self, ImputationOutput, PfinConfig};
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Rows per chunk for full-pass inference.
pub(crate) const INFERENCE_CHUNK: usize = 512;

/// Regression objective for the imputation network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ImputerObjective {
    BetaNll { beta: f64 },
    Mse,
}

pub fn image_matrix(samples: &[Sample]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.z_img.as_slice()).collect();
    Tensor::from_rows(&rows)
}

/// Text features of fully paired samples; any missing text is a contract error.
pub fn text_matrix(samples: &[Sample]) -> Result<Tensor> {
    let rows = samples
        .iter()
        .map(|s| s.z_txt.as_deref().ok_or_else(|| Error::Contract("sample has no text feature".into())))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

pub fn label_matrix(samples: &[Sample]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect())
        .collect();
    Tensor::from_rows(&rows)
}

/// [`pfin::impute`] over `z_img` in fixed-size chunks.
pub fn impute_batched(params: &ParamSet, z_img: &Tensor, cfg: &PfinConfig) -> Result<ImputationOutput> {
    let n = z_img.rows();
    let mut mu = Vec::with_capacity(z_img.len());
    let mut log_var = Vec::with_capacity(z_img.len());
    for start in (0..n).step_by(INFERENCE_CHUNK) {
        let idx: Vec<usize> = (start..n.min(start + INFERENCE_CHUNK)).collect();
        let out = pfin::impute(params, &z_img.gather_rows(&idx), cfg)?;
        mu.extend_from_slice(out.mu.data());
        log_var.extend_from_slice(out.log_var.data());
    }
    Ok(ImputationOutput {
        mu: Tensor::matrix(n, cfg.d, mu)?,
        log_var: Tensor::matrix(n, cfg.d, log_var)?,
    })
}

/// Shuffled minibatch index lists covering `0..n` once.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub objective: ImputerObjective,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Trains only the `pfin.*` parameters to predict `z_txt` from `z_img` for
/// `steps` Adam steps on minibatches drawn by reshuffled epochs.
pub fn fit_imputer(
    params: &mut ParamSet,
    z_img: &Tensor,
    z_txt: &Tensor,
    cfg: &PfinConfig,
    fit: FitConfig,
    rng: &mut impl Rng,
) -> Result<FitReport> {
    let FitConfig {
        objective,
        steps,
        batch_size,
        lr,
    } = fit;
    if z_img.shape() != z_txt.shape() {
        return Err(Error::dim("fit_imputer", z_img.shape(), z_txt.shape()));
    }
    if z_img.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(lr), params);
    let mut losses = Vec::with_capacity(steps);
    let mut batches = Vec::new().into_iter();
    while losses.len() < steps {
        let Some(idx) = batches.next() else {
            batches = epoch_batches(z_img.rows(), batch_size, rng).into_iter();
            continue;
        };
        let mut g = Graph::new();
        let p = params.bind(&mut g, pfin::is_pfin_key);
        let x = g.constant(z_img.gather_rows(&idx));
        let t = g.constant(z_txt.gather_rows(&idx));
        let out = pfin::pfin_forward(&mut g, &p, x, cfg)?;
        let loss = match objective {
            ImputerObjective::BetaNll { beta } => pfin::beta_nll_loss(&mut g, out, t, beta)?,
            ImputerObjective::Mse => pfin::mse_loss(&mut g, out.mu, t)?,
        };
        losses.push(g.value(loss).item());
        let mut grads = g.backward(loss)?;
        adam.step(params, &p.gradients(&mut grads))?;
    }
    Ok(FitReport { losses })
}
