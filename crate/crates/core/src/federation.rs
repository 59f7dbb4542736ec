//! Federated rounds: local client training, Fed-UQ-Avg / FedAvg weighting,
//! and fixed-order parameter aggregation.
//!
//! Each round broadcasts the global parameters, trains every non-empty
//! client on its own random stream (keyed by seed, client id and round),
//! weights the returned models, and aggregates them in client order. The
//! outcome therefore never depends on how an [`Executor`] schedules clients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::mean_auc;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamSet};
use crate::pfin::{self, PfinConfig};
use crate::rng::client_stream;
use crate::synth::{ClientDataset, Modality, Sample};
use crate::tensor::Tensor;
use crate::train::{epoch_batches, image_matrix, impute_batched, label_matrix, text_matrix, INFERENCE_CHUNK};

/// What stands in for the missing text feature on unimodal data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Imputer {
    Zero,
    /// Broadcast of the server-side mean text embedding.
    Uniform,
    /// μ head only, trained by MSE, no gate.
    DeterministicFin,
    /// μ gated by `sigmoid(−log σ²)`, trained by β-NLL.
    Probabilistic,
}

impl Imputer {
    fn uses_network(self) -> bool {
        matches!(self, Imputer::DeterministicFin | Imputer::Probabilistic)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    FedAvg,
    FedUqAvg { alpha: f64, temperature: f64 },
}

/// The five compared configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Zero,
    Uniform,
    FinFedAvg,
    PfinFedAvg,
    PfinFedUq,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Zero,
        Method::Uniform,
        Method::FinFedAvg,
        Method::PfinFedAvg,
        Method::PfinFedUq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Zero => "zero",
            Method::Uniform => "uniform",
            Method::FinFedAvg => "fin_fedavg",
            Method::PfinFedAvg => "pfin_fedavg",
            Method::PfinFedUq => "pfin_feduq",
        }
    }

    pub fn imputer(self) -> Imputer {
        match self {
            Method::Zero => Imputer::Zero,
            Method::Uniform => Imputer::Uniform,
            Method::FinFedAvg => Imputer::DeterministicFin,
            Method::PfinFedAvg | Method::PfinFedUq => Imputer::Probabilistic,
        }
    }

    pub fn strategy(self, alpha: f64, temperature: f64) -> Strategy {
        match self {
            Method::PfinFedUq => Strategy::FedUqAvg { alpha, temperature },
            _ => Strategy::FedAvg,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// When a client's mean imputation variance is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaWindow {
    /// Full inference pass over the client's images after local training.
    PostPass,
    /// Average over the minibatches seen during local training.
    RunningMean,
}

/// Which text the server feeds the fusion path when scoring held-out samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalText {
    /// Always impute from the image.
    Imputed,
    /// Use the observed text where present, impute otherwise.
    Observed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub pfin: PfinConfig,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the imputation loss next to BCE on multimodal clients.
    pub imputation_weight: f64,
    pub imputer: Imputer,
    pub strategy: Strategy,
    pub sigma_window: SigmaWindow,
    /// Let unimodal clients' classification loss update the imputation network.
    pub unimodal_grad_into_pfin: bool,
    pub eval_text: EvalText,
    /// Mean text embedding for [`Imputer::Uniform`].
    pub global_mean: Option<Tensor>,
    pub seed: u64,
}

impl FederationConfig {
    pub fn new(pfin: PfinConfig, method: Method, seed: u64) -> Self {
        FederationConfig {
            pfin,
            rounds: 20,
            epochs: 4,
            batch_size: 32,
            lr: 1e-4,
            imputation_weight: 1.0,
            imputer: method.imputer(),
            strategy: method.strategy(0.6, 0.2),
            sigma_window: SigmaWindow::PostPass,
            unimodal_grad_into_pfin: false,
            eval_text: EvalText::Imputed,
            global_mean: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pfin.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(self.imputation_weight.is_finite() && self.imputation_weight >= 0.0) {
            return Err(Error::Config("imputation_weight must be non-negative".into()));
        }
        if let Strategy::FedUqAvg { alpha, temperature } = self.strategy {
            check_blend(alpha, temperature)?;
        }
        if self.imputer == Imputer::Uniform {
            match &self.global_mean {
                None => return Err(Error::Config("uniform imputation needs the global mean embedding".into())),
                Some(m) if m.len() != self.pfin.d => {
                    return Err(Error::dim("global_mean", m.shape(), &[self.pfin.d]))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

fn check_blend(alpha: f64, temperature: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub modality: Modality,
    pub theta: ParamSet,
    /// Mean predicted variance over all local samples and dimensions.
    pub sigma_bar_sq: f64,
    pub n_k: usize,
    /// Sample-weighted mean loss of each local epoch.
    pub epoch_losses: Vec<f64>,
}

impl ClientUpdate {
    pub fn train_loss(&self) -> Option<f64> {
        if self.epoch_losses.is_empty() {
            None
        } else {
            Some(self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64)
        }
    }
}

/// Per-client data laid out as tensors once per round.
struct ClientTensors {
    z_img: Tensor,
    z_txt: Option<Tensor>,
    labels: Tensor,
    /// Text-path input for unimodal clients when it does not depend on the
    /// parameters being trained.
    fixed_text: Option<Tensor>,
}

fn unimodal_text(theta: &ParamSet, z_img: &Tensor, cfg: &FederationConfig) -> Result<Tensor> {
    let n = z_img.rows();
    match cfg.imputer {
        Imputer::Zero => Ok(Tensor::zeros(&[n, cfg.pfin.d])),
        Imputer::Uniform => {
            let mean = cfg
                .global_mean
                .as_ref()
                .ok_or_else(|| Error::Config("uniform imputation needs the global mean embedding".into()))?;
            let rows: Vec<&[f64]> = (0..n).map(|_| mean.data()).collect();
            Tensor::from_rows(&rows)
        }
        Imputer::DeterministicFin => Ok(impute_batched(theta, z_img, &cfg.pfin)?.mu),
        Imputer::Probabilistic => {
            let out = impute_batched(theta, z_img, &cfg.pfin)?;
            let gate = pfin::uncertainty_gate(&out.log_var);
            let gated = gate.data().iter().zip(out.mu.data()).map(|(g, m)| g * m).collect();
            Tensor::new(out.mu.shape().to_vec(), gated)
        }
    }
}

struct BatchLoss {
    loss: NodeId,
    /// Log-variance node when this batch ran the imputation network.
    log_var: Option<NodeId>,
}

fn batch_loss(g: &mut Graph, p: &Bound, data: &ClientTensors, idx: &[usize], cfg: &FederationConfig) -> Result<BatchLoss> {
    let z = g.constant(data.z_img.gather_rows(idx));
    let y = g.constant(data.labels.gather_rows(idx));
    let mut log_var = None;
    let fused = if let Some(txt) = &data.z_txt {
        let t = g.constant(txt.gather_rows(idx));
        let fused = pfin::fuse_multimodal(g, p, z, t, &cfg.pfin)?.z_fused;
        let imputation = match cfg.imputer {
            Imputer::Probabilistic => {
                let out = pfin::pfin_forward(g, p, z, &cfg.pfin)?;
                log_var = Some(out.log_var);
                Some(pfin::beta_nll_loss(g, out, t, cfg.pfin.beta)?)
            }
            Imputer::DeterministicFin => {
                let out = pfin::pfin_forward(g, p, z, &cfg.pfin)?;
                log_var = Some(out.log_var);
                Some(pfin::mse_loss(g, out.mu, t)?)
            }
            Imputer::Zero | Imputer::Uniform => None,
        };
        let logits = pfin::classify(g, p, fused)?;
        let bce = g.bce_with_logits(logits, y)?;
        let loss = match imputation {
            Some(l) => {
                let l = g.scale(l, cfg.imputation_weight);
                g.add(bce, l)?
            }
            None => bce,
        };
        return Ok(BatchLoss { loss, log_var });
    } else if let Some(text) = &data.fixed_text {
        let t = g.constant(text.gather_rows(idx));
        pfin::fuse_multimodal(g, p, z, t, &cfg.pfin)?.z_fused
    } else {
        let out = pfin::pfin_forward(g, p, z, &cfg.pfin)?;
        log_var = Some(out.log_var);
        match cfg.imputer {
            Imputer::Probabilistic => pfin::fuse(g, p, z, out, &cfg.pfin)?.z_fused,
            _ => pfin::fuse_multimodal(g, p, z, out.mu, &cfg.pfin)?.z_fused,
        }
    };
    let logits = pfin::classify(g, p, fused)?;
    let loss = g.bce_with_logits(logits, y)?;
    Ok(BatchLoss { loss, log_var })
}

fn mean_variance(theta: &ParamSet, z_img: &Tensor, cfg: &PfinConfig) -> Result<f64> {
    Ok(impute_batched(theta, z_img, cfg)?.mean_variance())
}

/// Runs `cfg.epochs` epochs of Adam on a copy of `global` over the client's
/// data and reports the result with the client's mean imputation variance.
///
/// Multimodal clients minimize BCE on their observed pairs plus the
/// weighted imputation loss. Unimodal clients minimize BCE through the
/// imputed text feature.
pub fn local_train(
    global: &ParamSet,
    client: &ClientDataset,
    cfg: &FederationConfig,
    rng: &mut impl Rng,
) -> Result<ClientUpdate> {
    if client.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut theta = global.clone();
    let z_img = image_matrix(&client.samples)?;
    let z_txt = match client.modality {
        Modality::Multimodal => Some(text_matrix(&client.samples)?),
        Modality::Unimodal => None,
    };
    let on_graph = z_txt.is_none() && cfg.unimodal_grad_into_pfin && cfg.imputer.uses_network();
    let fixed_text = if z_txt.is_none() && !on_graph && cfg.epochs > 0 {
        Some(unimodal_text(&theta, &z_img, cfg)?)
    } else {
        None
    };
    let data = ClientTensors {
        labels: label_matrix(&client.samples)?,
        z_img,
        z_txt,
        fixed_text,
    };

    let n = client.n_k();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &theta);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let (mut running_var, mut running_count) = (0.0, 0usize);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(n, cfg.batch_size, rng) {
            let mut g = Graph::new();
            let p = theta.bind(&mut g, |_| true);
            let step = batch_loss(&mut g, &p, &data, &idx, cfg)?;
            total += g.value(step.loss).item() * idx.len() as f64;
            if cfg.sigma_window == SigmaWindow::RunningMean {
                let lv = match step.log_var {
                    Some(id) => g.value(id).clone(),
                    None => pfin::impute(&theta, &data.z_img.gather_rows(&idx), &cfg.pfin)?.log_var,
                };
                running_var += lv.data().iter().map(|&v| libm::exp(v)).sum::<f64>();
                running_count += lv.len();
            }
            let mut grads = g.backward(step.loss)?;
            adam.step(&mut theta, &p.gradients(&mut grads))?;
        }
        epoch_losses.push(total / n as f64);
    }

    let sigma_bar_sq = if cfg.sigma_window == SigmaWindow::RunningMean && running_count > 0 {
        running_var / running_count as f64
    } else {
        mean_variance(&theta, &data.z_img, &cfg.pfin)?
    };
    Ok(ClientUpdate {
        client_id: client.client_id,
        modality: client.modality,
        theta,
        sigma_bar_sq,
        n_k: n,
        epoch_losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationWeights {
    pub w_data: Vec<f64>,
    pub w_conf: Vec<f64>,
    pub lambda: Vec<f64>,
    pub alpha: f64,
    pub temperature: f64,
}

fn data_weights(n: &[usize]) -> Result<Vec<f64>> {
    if n.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n.contains(&0) {
        return Err(Error::Contract("client update with zero samples".into()));
    }
    let total: f64 = n.iter().map(|&k| k as f64).sum();
    Ok(n.iter().map(|&k| k as f64 / total).collect())
}

/// Confidence weights `exp(−σ̄²_k/T) / Σ_j exp(−σ̄²_j/T)`, evaluated as a
/// softmax shifted by the smallest `σ̄²/T` so it never underflows to 0/0.
pub fn confidence_weights(sigma_bar_sq: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if let Some(&bad) = sigma_bar_sq.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Contract(format!("mean variance must be finite and non-negative, got {bad}")));
    }
    let min = sigma_bar_sq.iter().copied().fold(f64::INFINITY, f64::min);
    let conf: Vec<f64> = sigma_bar_sq.iter().map(|&s| libm::exp(-(s - min) / temperature)).collect();
    let total: f64 = conf.iter().sum();
    Ok(conf.into_iter().map(|c| c / total).collect())
}

/// Blends size and confidence weights: `λ = (1 − α)·w_data + α·w_conf`.
pub fn fed_uq_avg_weights(updates: &[ClientUpdate], alpha: f64, temperature: f64) -> Result<AggregationWeights> {
    check_blend(alpha, temperature)?;
    let n: Vec<usize> = updates.iter().map(|u| u.n_k).collect();
    let s: Vec<f64> = updates.iter().map(|u| u.sigma_bar_sq).collect();
    weights_from_stats(&n, &s, alpha, temperature)
}

/// [`fed_uq_avg_weights`] from bare sample counts and mean variances.
pub fn weights_from_stats(n: &[usize], sigma_bar_sq: &[f64], alpha: f64, temperature: f64) -> Result<AggregationWeights> {
    check_blend(alpha, temperature)?;
    if n.len() != sigma_bar_sq.len() {
        return Err(Error::dim("weights", &[n.len()], &[sigma_bar_sq.len()]));
    }
    let w_data = data_weights(n)?;
    let w_conf = confidence_weights(sigma_bar_sq, temperature)?;
    let lambda = w_data
        .iter()
        .zip(&w_conf)
        .map(|(d, c)| (1.0 - alpha) * d + alpha * c)
        .collect();
    Ok(AggregationWeights {
        w_data,
        w_conf,
        lambda,
        alpha,
        temperature,
    })
}

/// Size-proportional weights; `w_conf` is reported uniform and unused.
pub fn fedavg_weights(updates: &[ClientUpdate]) -> Result<AggregationWeights> {
    let n: Vec<usize> = updates.iter().map(|u| u.n_k).collect();
    let w_data = data_weights(&n)?;
    Ok(AggregationWeights {
        w_conf: vec![1.0 / n.len() as f64; n.len()],
        lambda: w_data.clone(),
        w_data,
        alpha: 0.0,
        temperature: f64::INFINITY,
    })
}

pub fn strategy_weights(updates: &[ClientUpdate], strategy: Strategy) -> Result<AggregationWeights> {
    match strategy {
        Strategy::FedAvg => fedavg_weights(updates),
        Strategy::FedUqAvg { alpha, temperature } => fed_uq_avg_weights(updates, alpha, temperature),
    }
}

/// `Σ_k λ_k·θ_k` per parameter, accumulated in the given order.
pub fn aggregate_params(thetas: &[&ParamSet], lambda: &[f64]) -> Result<ParamSet> {
    let (first, rest) = thetas.split_first().ok_or(Error::EmptyDataset)?;
    if lambda.len() != thetas.len() {
        return Err(Error::dim("aggregate", &[thetas.len()], &[lambda.len()]));
    }
    for t in rest {
        first.check_compatible(t)?;
    }
    let mut out = first.scaled(lambda[0]);
    for (t, &l) in rest.iter().zip(&lambda[1..]) {
        for ((_, acc), (_, x)) in out.iter_mut().zip(t.iter()) {
            acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, &v)| *a += l * v);
        }
    }
    Ok(out)
}

pub fn aggregate(updates: &[ClientUpdate], weights: &AggregationWeights) -> Result<ParamSet> {
    let thetas: Vec<&ParamSet> = updates.iter().map(|u| &u.theta).collect();
    aggregate_params(&thetas, &weights.lambda)
}

/// Maps a function over clients, returning results in input order.
pub trait Executor {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R>;
}

/// Runs clients one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        items.iter().map(f).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRoundStat {
    pub client_id: usize,
    pub modality: Modality,
    pub n_k: usize,
    pub sigma_bar_sq: f64,
    pub lambda: f64,
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub clients: Vec<ClientRoundStat>,
    pub weights: AggregationWeights,
    pub val_auc: Option<f64>,
    /// Filled in by the caller's observer; the core has no clock.
    pub wall_time_secs: Option<f64>,
}

impl RoundRecord {
    pub fn mean_sigma(&self, modality: Modality) -> Option<f64> {
        let v: Vec<f64> = self
            .clients
            .iter()
            .filter(|c| c.modality == modality)
            .map(|c| c.sigma_bar_sq)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_train_loss(&self) -> Option<f64> {
        let v: Vec<f64> = self.clients.iter().filter_map(|c| c.train_loss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationOutcome {
    pub records: Vec<RoundRecord>,
    pub params: ParamSet,
}

/// Classifier logits for `samples` under `params`.
pub fn predict(params: &ParamSet, samples: &[Sample], cfg: &FederationConfig) -> Result<Tensor> {
    let c = cfg.pfin.n_labels;
    let mut logits = Vec::with_capacity(samples.len() * c);
    for chunk in samples.chunks(INFERENCE_CHUNK) {
        let z = image_matrix(chunk)?;
        let mut text = unimodal_text(params, &z, cfg)?;
        if cfg.eval_text == EvalText::Observed {
            let d = cfg.pfin.d;
            for (i, s) in chunk.iter().enumerate() {
                if let Some(t) = &s.z_txt {
                    text.data_mut()[i * d..(i + 1) * d].copy_from_slice(t);
                }
            }
        }
        let fused = pfin::fuse_plain(&z, &text, params, &cfg.pfin)?;
        logits.extend_from_slice(pfin::classify_eval(&fused.z_fused, params)?.data());
    }
    Tensor::matrix(samples.len(), c, logits)
}

/// Mean per-class AUC of `params` on `samples`.
pub fn evaluate_auc(params: &ParamSet, samples: &[Sample], cfg: &FederationConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = predict(params, samples, cfg)?;
    let labels: Vec<Vec<bool>> = samples.iter().map(|s| s.labels.clone()).collect();
    Ok(mean_auc(&logits, &labels)?.mean)
}

/// Full federated training loop.
///
/// `observer` sees each completed round (and may fill in its wall time)
/// together with the freshly aggregated global parameters.
pub fn run_federation<E: Executor>(
    cfg: &FederationConfig,
    clients: &[ClientDataset],
    validation: &[Sample],
    init: ParamSet,
    executor: &E,
    mut observer: impl FnMut(&mut RoundRecord, &ParamSet) -> Result<()>,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    let mut active: Vec<&ClientDataset> = Vec::with_capacity(clients.len());
    for c in clients {
        if c.samples.is_empty() {
            log::warn!("client {} has no samples and is excluded from every round", c.client_id);
        } else {
            active.push(c);
        }
    }
    active.sort_by_key(|c| c.client_id);
    if !active.iter().any(|c| c.modality == Modality::Multimodal) {
        return Err(Error::Config("at least one non-empty multimodal client is required".into()));
    }

    let mut global = init;
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let results = executor.map(&active, |c| {
            let mut rng = client_stream(cfg.seed, c.client_id, round);
            local_train(&global, c, cfg, &mut rng)
        });
        let updates = results.into_iter().collect::<Result<Vec<_>>>().map_err(|e| e.in_round(round))?;
        let weights = strategy_weights(&updates, cfg.strategy).map_err(|e| e.in_round(round))?;
        global = aggregate(&updates, &weights).map_err(|e| e.in_round(round))?;

        let val_auc = if validation.is_empty() {
            None
        } else {
            match evaluate_auc(&global, validation, cfg) {
                Ok(a) => Some(a),
                Err(Error::UndefinedMetric(msg)) => {
                    log::warn!("round {round}: validation AUC undefined: {msg}");
                    None
                }
                Err(e) => return Err(e.in_round(round)),
            }
        };
        let clients = updates
            .iter()
            .zip(&weights.lambda)
            .map(|(u, &lambda)| ClientRoundStat {
                client_id: u.client_id,
                modality: u.modality,
                n_k: u.n_k,
                sigma_bar_sq: u.sigma_bar_sq,
                lambda,
                train_loss: u.train_loss(),
            })
            .collect();
        let mut record = RoundRecord {
            round,
            clients,
            weights,
            val_auc,
            wall_time_secs: None,
        };
        observer(&mut record, &global)?;
        records.push(record);
    }
    Ok(FederationOutcome { records, params: global })
}

/// Key of the first parameter whose values differ between `a` and `b`
/// (bitwise), if any.
pub fn first_difference(a: &ParamSet, b: &ParamSet) -> Option<String> {
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        if na != nb
            || ta.shape() != tb.shape()
            || ta.data().iter().zip(tb.data()).any(|(x, y)| x.to_bits() != y.to_bits())
        {
            return Some(String::from(na));
        }
    }
    (a.len() != b.len()).then(|| String::from("<length>"))
}
