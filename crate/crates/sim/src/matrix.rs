//! Sweeps of methods × ratios × seeds over a base configuration.

use std::fs;
use std::path::{Path, PathBuf};

use pfin_core::federation::Method;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Ratio};
use crate::error::{io_at, Result, SimError};
use crate::experiment::{run_experiment, Existing, Summary};
use crate::report::{compare, render_reports, ResultTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub methods: Vec<String>,
    pub ratios: Vec<Ratio>,
    pub seeds: Vec<u64>,
    /// Root directory; each run writes to `<ratio>/<method>/seed-<n>` below it.
    pub output_dir: PathBuf,
    /// Run configurations concurrently on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub base: ExperimentConfig,
}

impl Sweep {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        toml::from_str(&text).map_err(|e| SimError::Validation(format!("{}: {e}", path.display())))
    }

    /// Every configuration of the sweep, validated, in ratio-method-seed order.
    pub fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        let methods = self
            .methods
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if methods.is_empty() || self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(SimError::Validation("sweep needs at least one method, ratio, and seed".into()));
        }
        let mut out = Vec::new();
        for &ratio in &self.ratios {
            for &method in &methods {
                for &seed in &self.seeds {
                    let mut cfg = self.base.clone();
                    cfg.ratio = ratio;
                    cfg.clients = ratio.clients();
                    cfg.method = method;
                    cfg.seed = seed;
                    cfg.output_dir = self
                        .output_dir
                        .join(format!("{}-{}", ratio.unimodal, ratio.multimodal))
                        .join(method.name())
                        .join(format!("seed-{seed}"));
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub summaries: Vec<Summary>,
    pub table: ResultTable,
    pub report: String,
}

/// Runs every configuration, then writes `results.csv` and `report.txt`
/// into the sweep root.
pub fn run_matrix(sweep: &Sweep, existing: Existing) -> Result<MatrixOutcome> {
    let configs = sweep.configs()?;
    let run = |cfg: &ExperimentConfig| run_experiment(cfg, existing);
    let summaries = if sweep.parallel {
        configs.par_iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        configs.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let table = ResultTable::from_summaries(&summaries);
    let report = format!("{}\n{}", table.render(), render_reports(&compare(&table)));
    fs::create_dir_all(&sweep.output_dir).map_err(io_at(&sweep.output_dir))?;
    table.write_csv(&sweep.output_dir.join("results.csv"))?;
    let report_path = sweep.output_dir.join("report.txt");
    fs::write(&report_path, &report).map_err(io_at(&report_path))?;
    Ok(MatrixOutcome {
        summaries,
        table,
        report,
    })
}
