//! One experiment end to end: data, federation, evaluation, artifacts.
//!
//! Artifacts are written into a temporary sibling of the output directory
//! and moved into place only once complete, so a failed run leaves nothing
//! behind. When the output directory already holds a run, the new run's
//! manifest must match it hash for hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pfin_core::federation::{
    predict, run_federation, Executor, FederationConfig, RoundRecord, Sequential,
};
use pfin_core::metrics::{decile_analysis, default_levels, mean_auc, reliability, DecileReport, ReliabilityCurve};
use pfin_core::pfin::{self, global_mean_embedding};
use pfin_core::rng::{stream, Purpose};
use pfin_core::synth::{assign_modalities, dirichlet_partition, ClientDataset, Generator, Modality, Sample};
use pfin_core::train::{image_matrix, impute_batched, text_matrix};
use pfin_core::{ParamSet, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ExperimentConfig, Ratio};
use crate::error::{io_at, Result, SimError};
use crate::executor::Parallel;
use crate::fixtures;
use crate::manifest::{Manifest, MANIFEST_FILE};

/// Test rows recorded in `fixtures.json`.
const FIXTURE_ROWS: usize = 8;

/// Federated clients plus the server-side validation and test splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub clients: Vec<ClientDataset>,
    pub validation: Vec<Sample>,
    /// Pooled held-out samples, text included.
    pub test: Vec<Sample>,
    /// Mean text feature over multimodal clients.
    pub global_mean: Option<Tensor>,
}

/// Generates, splits, partitions, and assigns modalities.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let gen = Generator::new(cfg.generator_spec())?;
    let mut samples = gen.generate(cfg.n_samples)?;
    samples.shuffle(&mut stream(cfg.seed, Purpose::Split));
    let (n_test, n_val, _) = cfg.split_sizes();
    let train = samples.split_off(n_test + n_val);
    let validation = samples.split_off(n_test);
    let test = samples;

    let mut clients = dirichlet_partition(train, cfg.clients, cfg.alpha_dir, cfg.seed)?;
    assign_modalities(&mut clients, cfg.ratio.unimodal, cfg.ratio.multimodal, cfg.seed)?;
    for c in clients.iter_mut().filter(|c| c.modality == Modality::Unimodal) {
        gen.apply_domain_shift(c);
    }
    let texts = clients
        .iter()
        .filter(|c| c.modality == Modality::Multimodal)
        .flat_map(|c| c.samples.iter().filter_map(|s| s.z_txt.as_deref()));
    let global_mean = global_mean_embedding(texts, cfg.d).ok();
    Ok(Prepared {
        clients,
        validation,
        test,
        global_mean,
    })
}

/// Calibration of the imputation head on samples with observed text.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub reliability: ReliabilityCurve,
    pub deciles: DecileReport,
    /// `None` when the decile statistics are constant.
    pub spearman: Option<f64>,
}

pub fn calibrate(params: &ParamSet, samples: &[Sample], cfg: &FederationConfig) -> Result<Calibration> {
    let out = impute_batched(params, &image_matrix(samples)?, &cfg.pfin)?;
    let target = text_matrix(samples)?;
    let reliability = reliability(&out, &target, &default_levels())?;
    let deciles = decile_analysis(&out, &target)?;
    let spearman = match deciles.spearman() {
        Ok(r) => Some(r),
        Err(pfin_core::Error::UndefinedMetric(msg)) => {
            log::warn!("uncertainty-error rank correlation undefined: {msg}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    Ok(Calibration {
        reliability,
        deciles,
        spearman,
    })
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub ratio: Ratio,
    pub seed: u64,
    pub rounds: usize,
    /// Mean per-label AUC on the pooled test split.
    pub mean_auc: f64,
    /// Labels left out of `mean_auc` for lack of both classes.
    pub auc_labels_skipped: usize,
    pub ece: f64,
    pub spearman: Option<f64>,
    pub final_val_auc: Option<f64>,
    pub sigma_unimodal_first: Option<f64>,
    pub sigma_unimodal_last: Option<f64>,
    pub sigma_multimodal_first: Option<f64>,
    pub sigma_multimodal_last: Option<f64>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        serde_json::from_str(&text).map_err(|e| SimError::format(path, e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    pub records: Vec<RoundRecord>,
    pub params: ParamSet,
    pub calibration: Calibration,
    /// Global parameters after every `checkpoint_every`-th round.
    pub snapshots: Vec<(usize, ParamSet)>,
    pub prepared: Prepared,
}

/// Runs the experiment in memory.
pub fn execute<E: Executor>(cfg: &ExperimentConfig, executor: &E) -> Result<ExperimentOutcome> {
    let prepared = prepare(cfg)?;
    let fed = cfg.federation_config(prepared.global_mean.clone());
    let init = pfin::init_params(&fed.pfin, &mut stream(cfg.seed, Purpose::Init))?;

    let mut snapshots = Vec::new();
    let mut last = Instant::now();
    let outcome = run_federation(&fed, &prepared.clients, &prepared.validation, init, executor, |record, params| {
        let secs = last.elapsed().as_secs_f64();
        last = Instant::now();
        record.wall_time_secs = Some(secs);
        log::info!(
            "{} seed {} round {}/{}: val AUC {}, {:.2}s",
            cfg.method,
            cfg.seed,
            record.round,
            fed.rounds,
            record.val_auc.map_or("n/a".into(), |a| format!("{a:.4}")),
            secs
        );
        if cfg.checkpoint_every > 0 && record.round % cfg.checkpoint_every == 0 && record.round < fed.rounds {
            snapshots.push((record.round, params.clone()));
        }
        Ok(())
    })?;

    let logits = predict(&outcome.params, &prepared.test, &fed)?;
    let labels: Vec<Vec<bool>> = prepared.test.iter().map(|s| s.labels.clone()).collect();
    let auc = mean_auc(&logits, &labels)?;
    let calibration = calibrate(&outcome.params, &prepared.test, &fed)?;
    let sigma = |r: Option<&RoundRecord>, m| r.and_then(|r| r.mean_sigma(m));
    let (first, last) = (outcome.records.first(), outcome.records.last());
    let summary = Summary {
        method: cfg.method.name().into(),
        ratio: cfg.ratio,
        seed: cfg.seed,
        rounds: cfg.rounds,
        mean_auc: auc.mean,
        auc_labels_skipped: auc.skipped().count(),
        ece: calibration.reliability.ece,
        spearman: calibration.spearman,
        final_val_auc: last.and_then(|r| r.val_auc),
        sigma_unimodal_first: sigma(first, Modality::Unimodal),
        sigma_unimodal_last: sigma(last, Modality::Unimodal),
        sigma_multimodal_first: sigma(first, Modality::Multimodal),
        sigma_multimodal_last: sigma(last, Modality::Multimodal),
    };
    Ok(ExperimentOutcome {
        summary,
        records: outcome.records,
        params: outcome.params,
        calibration,
        snapshots,
        prepared,
    })
}

/// What to do when the output directory already exists.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Existing {
    /// Require the new artifacts to hash identically, then replace.
    #[default]
    Verify,
    /// Replace whatever is there.
    Replace,
}

/// Runs the experiment and writes its artifacts to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, existing: Existing) -> Result<Summary> {
    cfg.validate()?;
    let outcome = if cfg.parallel_clients {
        execute(cfg, &Parallel)?
    } else {
        execute(cfg, &Sequential)?
    };
    commit(cfg, &outcome, existing)?;
    Ok(outcome.summary)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_error(path: &Path) -> impl FnOnce(csv::Error) -> SimError + '_ {
    move |e| SimError::format(path, e.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(header).map_err(csv_error(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_error(path))?;
    }
    w.flush().map_err(io_at(path))
}

/// Writes every artifact of `outcome` into `dir`, which must exist.
pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<Manifest> {
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(io_at(&config_path))?;

    let modality = |m| match m {
        Modality::Multimodal => "multimodal",
        Modality::Unimodal => "unimodal",
    };
    write_csv(
        &dir.join("rounds.csv"),
        &["round", "client_id", "modality", "n_k", "sigma_bar_sq", "lambda", "train_loss"],
        outcome.records.iter().flat_map(|r| {
            r.clients.iter().map(move |c| {
                vec![
                    r.round.to_string(),
                    c.client_id.to_string(),
                    modality(c.modality).into(),
                    c.n_k.to_string(),
                    c.sigma_bar_sq.to_string(),
                    c.lambda.to_string(),
                    opt(c.train_loss),
                ]
            })
        }),
    )?;
    write_csv(
        &dir.join("round_summary.csv"),
        &["round", "val_auc", "mean_sigma_unimodal", "mean_sigma_multimodal", "mean_train_loss"],
        outcome.records.iter().map(|r| {
            vec![
                r.round.to_string(),
                opt(r.val_auc),
                opt(r.mean_sigma(Modality::Unimodal)),
                opt(r.mean_sigma(Modality::Multimodal)),
                opt(r.mean_train_loss()),
            ]
        }),
    )?;
    let rel = &outcome.calibration.reliability;
    write_csv(
        &dir.join("reliability.csv"),
        &["level", "observed"],
        rel.nominal_levels
            .iter()
            .zip(&rel.observed_coverage)
            .map(|(l, o)| vec![l.to_string(), o.to_string()]),
    )?;
    write_csv(
        &dir.join("deciles.csv"),
        &["bin", "mean_sigma", "mean_err", "count"],
        outcome.calibration.deciles.bins.iter().enumerate().map(|(i, b)| {
            vec![
                (i + 1).to_string(),
                b.mean_sigma_sq.to_string(),
                b.mean_sq_error.to_string(),
                b.count.to_string(),
            ]
        }),
    )?;

    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, outcome.summary.to_json()).map_err(io_at(&summary_path))?;

    let fed = cfg.federation_config(None);
    let rows: Vec<&[f64]> = outcome
        .prepared
        .test
        .iter()
        .take(FIXTURE_ROWS)
        .map(|s| s.z_img.as_slice())
        .collect();
    let fixture = fixtures::generate(&outcome.params, &fed.pfin, &Tensor::from_rows(&rows)?)?;
    fixtures::write(&dir.join("fixtures.json"), &fixture)?;

    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(io_at(&ckpt))?;
    for (round, params) in &outcome.snapshots {
        checkpoint::save(params, &ckpt.join(format!("round_{round:04}")))?;
    }
    checkpoint::save(&outcome.params, &ckpt.join("final"))?;

    let manifest = Manifest::build(dir)?;
    manifest.write(dir)?;
    Ok(manifest)
}

fn staging_dir(target: &Path) -> Result<tempfile::TempDir> {
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_at(&parent))?;
    let stem = target.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
    tempfile::Builder::new()
        .prefix(&format!(".{stem}.partial-"))
        .tempdir_in(&parent)
        .map_err(io_at(&parent))
}

/// Writes `outcome` to `cfg.output_dir` through a staging directory.
pub fn commit(cfg: &ExperimentConfig, outcome: &ExperimentOutcome, existing: Existing) -> Result<()> {
    let target = &cfg.output_dir;
    let staging = staging_dir(target)?;
    let manifest = write_artifacts(staging.path(), cfg, outcome)?;

    if target.exists() {
        let is_empty = fs::read_dir(target).map_err(io_at(target))?.next().is_none();
        if existing == Existing::Verify && !is_empty {
            if !target.join(MANIFEST_FILE).exists() {
                return Err(SimError::Validation(format!(
                    "{} exists and is not an experiment directory",
                    target.display()
                )));
            }
            if let Some(detail) = Manifest::read(target)?.difference(&manifest) {
                return Err(SimError::Manifest {
                    dir: target.clone(),
                    detail,
                });
            }
            log::info!("{}: re-run reproduced every recorded hash", target.display());
        }
        fs::remove_dir_all(target).map_err(io_at(target))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, target).map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        SimError::Io {
            path: target.clone(),
            source: e,
        }
    })
}
