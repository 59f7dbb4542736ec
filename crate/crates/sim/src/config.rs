//! Flat TOML experiment configuration with `key=value` overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pfin_core::federation::{EvalText, FederationConfig, Method, SigmaWindow};
use pfin_core::pfin::{NormCheck, PfinConfig};
use pfin_core::synth::{GeneratorSpec, Mixing};
use pfin_core::Tensor;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{io_at, Result, SimError};

/// Unimodal-to-multimodal client split, written `"8:2"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ratio {
    pub unimodal: usize,
    pub multimodal: usize,
}

impl Ratio {
    pub const fn new(unimodal: usize, multimodal: usize) -> Self {
        Ratio { unimodal, multimodal }
    }

    pub fn clients(self) -> usize {
        self.unimodal + self.multimodal
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.unimodal, self.multimodal)
    }
}

impl FromStr for Ratio {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || SimError::Validation(format!("ratio `{s}` is not of the form unimodal:multimodal"));
        let (u, m) = s.split_once(':').ok_or_else(bad)?;
        Ok(Ratio {
            unimodal: u.trim().parse().map_err(|_| bad())?,
            multimodal: m.trim().parse().map_err(|_| bad())?,
        })
    }
}

fn via_display<T: fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn via_from_str<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
where
    T: FromStr,
    T::Err: fmt::Display,
    D: Deserializer<'de>,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        via_display(self, s)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        via_from_str(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    Gaussian,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaWindowKind {
    PostPass,
    RunningMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTextKind {
    Imputed,
    Observed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(alias = "K")]
    pub clients: usize,
    pub ratio: Ratio,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    #[serde(alias = "T")]
    pub temperature: f64,
    pub beta: f64,
    pub alpha_dir: f64,
    #[serde(serialize_with = "via_display", deserialize_with = "via_from_str")]
    pub method: Method,
    pub output_dir: PathBuf,

    pub n_samples: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,

    pub d: usize,
    pub latent_dim: usize,
    pub n_labels: usize,
    pub noise_floor: f64,
    pub noise_ceiling: f64,
    pub mixing: MixingKind,
    pub difficulty_scale: f64,
    pub label_scale: f64,
    pub unimodal_shift: f64,

    pub n_layers: usize,
    pub n_heads: usize,
    pub fusion_heads: usize,
    pub log_var_clamp: f64,
    pub imputation_weight: f64,
    pub sigma_window: SigmaWindowKind,
    pub unimodal_grad_into_pfin: bool,
    pub eval_text: EvalTextKind,

    /// Write a checkpoint every this many rounds; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Train clients of a round on the rayon pool.
    pub parallel_clients: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let generator = GeneratorSpec::default();
        let pfin = PfinConfig::default();
        ExperimentConfig {
            seed: 0,
            clients: 10,
            ratio: Ratio::new(8, 2),
            rounds: 20,
            local_epochs: 4,
            batch_size: 32,
            lr: 1e-4,
            alpha: 0.6,
            temperature: 0.2,
            beta: pfin.beta,
            alpha_dir: 0.5,
            method: Method::PfinFedUq,
            output_dir: PathBuf::from("runs/default"),
            n_samples: 3000,
            test_fraction: 0.2,
            val_fraction: 0.1,
            d: generator.d,
            latent_dim: generator.latent_dim,
            n_labels: generator.n_labels,
            noise_floor: generator.noise_floor,
            noise_ceiling: generator.noise_ceiling,
            mixing: MixingKind::Gaussian,
            difficulty_scale: generator.difficulty_scale,
            label_scale: generator.label_scale,
            unimodal_shift: generator.unimodal_shift,
            n_layers: pfin.n_layers,
            n_heads: pfin.n_heads,
            fusion_heads: pfin.fusion_heads,
            log_var_clamp: pfin.log_var_clamp,
            imputation_weight: 1.0,
            sigma_window: SigmaWindowKind::PostPass,
            unimodal_grad_into_pfin: false,
            eval_text: EvalTextKind::Imputed,
            checkpoint_every: 0,
            parallel_clients: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::Validation(e.to_string()))
    }

    /// Fails only for seeds above `i64::MAX`, which TOML cannot hold.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SimError::Validation(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_toml(&text)
    }

    /// Applies one `key=value` override. Values are read as TOML scalars
    /// and fall back to bare strings (`ratio=6:4`, `method=zero`).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let assignment = assignment.trim_start_matches("--");
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| SimError::Validation(format!("override `{assignment}` is not key=value")))?;
        let key = match key.trim() {
            "K" => "clients",
            "T" => "temperature",
            k => k,
        };
        let mut table = toml::Table::try_from(&*self).map_err(|e| SimError::Validation(e.to_string()))?;
        let current = table
            .get(key)
            .ok_or_else(|| SimError::Validation(format!("unknown config key `{key}`")))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let value = match (current, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::String(_), toml::Value::Integer(_) | toml::Value::Float(_)) => {
                toml::Value::String(raw.to_string())
            }
            (_, v) => v,
        };
        table.insert(key.to_string(), value);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| SimError::Validation(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        assignments.iter().try_for_each(|a| self.apply_override(a.as_ref()))
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            d: self.d,
            latent_dim: self.latent_dim,
            n_labels: self.n_labels,
            noise_floor: self.noise_floor,
            noise_ceiling: self.noise_ceiling,
            mixing: match self.mixing {
                MixingKind::Gaussian => Mixing::Gaussian,
                MixingKind::Identity => Mixing::Identity,
            },
            difficulty_scale: self.difficulty_scale,
            label_scale: self.label_scale,
            unimodal_shift: self.unimodal_shift,
            seed: self.seed,
        }
    }

    pub fn pfin_config(&self) -> PfinConfig {
        PfinConfig {
            d: self.d,
            n_labels: self.n_labels,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            beta: self.beta,
            log_var_clamp: self.log_var_clamp,
            fusion_heads: self.fusion_heads,
            // Generated features are unit-norm by construction; domain-shifted
            // ones are renormalized too.
            norm_check: NormCheck::Warn,
        }
    }

    pub fn federation_config(&self, global_mean: Option<Tensor>) -> FederationConfig {
        let mut cfg = FederationConfig::new(self.pfin_config(), self.method, self.seed);
        cfg.rounds = self.rounds;
        cfg.epochs = self.local_epochs;
        cfg.batch_size = self.batch_size;
        cfg.lr = self.lr;
        cfg.imputation_weight = self.imputation_weight;
        cfg.strategy = self.method.strategy(self.alpha, self.temperature);
        cfg.sigma_window = match self.sigma_window {
            SigmaWindowKind::PostPass => SigmaWindow::PostPass,
            SigmaWindowKind::RunningMean => SigmaWindow::RunningMean,
        };
        cfg.unimodal_grad_into_pfin = self.unimodal_grad_into_pfin;
        cfg.eval_text = match self.eval_text {
            EvalTextKind::Imputed => EvalText::Imputed,
            EvalTextKind::Observed => EvalText::Observed,
        };
        cfg.global_mean = global_mean;
        cfg
    }

    /// Sizes of the held-out test split, validation split, and training pool.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_samples;
        let test = (n as f64 * self.test_fraction).round() as usize;
        let val = (n as f64 * self.val_fraction).round() as usize;
        (test, val, n.saturating_sub(test + val))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SimError::Validation(msg));
        if i64::try_from(self.seed).is_err() {
            return fail(format!("seed {} exceeds the largest TOML integer", self.seed));
        }
        if self.clients < 2 {
            return fail(format!("need at least two clients, got {}", self.clients));
        }
        if self.ratio.clients() != self.clients {
            return fail(format!("ratio {} does not sum to {} clients", self.ratio, self.clients));
        }
        if self.ratio.multimodal == 0 {
            return fail("at least one multimodal client is required to train the imputation network".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive and finite, got {}", self.temperature));
        }
        if !(self.alpha_dir > 0.0 && self.alpha_dir.is_finite()) {
            return fail(format!("alpha_dir must be positive and finite, got {}", self.alpha_dir));
        }
        if !(self.imputation_weight >= 0.0 && self.imputation_weight.is_finite()) {
            return fail(format!("imputation_weight must be non-negative, got {}", self.imputation_weight));
        }
        let fractions_ok = self.test_fraction > 0.0
            && self.val_fraction >= 0.0
            && self.test_fraction + self.val_fraction < 1.0;
        if !fractions_ok {
            return fail(format!(
                "test_fraction {} and val_fraction {} must be non-negative, test positive, and sum below 1",
                self.test_fraction, self.val_fraction
            ));
        }
        let (test, _, train) = self.split_sizes();
        if test < 2 {
            return fail(format!("test split of {test} samples is too small"));
        }
        if train < self.clients {
            return fail(format!("{train} training samples cannot cover {} clients", self.clients));
        }
        self.generator_spec().validate().map_err(|e| SimError::Validation(e.to_string()))?;
        self.pfin_config().validate().map_err(|e| SimError::Validation(e.to_string()))?;
        Ok(())
    }
}
