//! Regression fixtures of `(input, μ, σ², gate, z_fused)` for a fixed
//! parameter set.

use std::fs;
use std::path::Path;

use pfin_core::pfin::{self, PfinConfig};
use pfin_core::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Result, SimError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureCase {
    pub input: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_sq: Vec<f64>,
    pub gate: Vec<f64>,
    pub z_fused: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureFile {
    pub d: usize,
    pub cases: Vec<FixtureCase>,
}

/// Runs imputation and gated fusion on every row of `z_img`.
pub fn generate(params: &ParamSet, cfg: &PfinConfig, z_img: &Tensor) -> Result<FixtureFile> {
    let out = pfin::impute(params, z_img, cfg)?;
    let fused = pfin::fuse_eval(z_img, &out, params, cfg)?;
    let var = out.variance();
    let d = cfg.d;
    let row = |t: &Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
    let cases = (0..z_img.rows())
        .map(|i| FixtureCase {
            input: z_img.row(i).to_vec(),
            mu: row(&out.mu, i),
            sigma_sq: row(&var, i),
            gate: row(&fused.gate, i),
            z_fused: row(&fused.z_fused, i),
        })
        .collect();
    Ok(FixtureFile { d, cases })
}

/// Largest absolute deviation between `file` and a fresh evaluation.
pub fn max_deviation(params: &ParamSet, cfg: &PfinConfig, file: &FixtureFile) -> Result<f64> {
    if file.d != cfg.d {
        return Err(SimError::Validation(format!("fixture d={} but model d={}", file.d, cfg.d)));
    }
    let rows: Vec<&[f64]> = file.cases.iter().map(|c| c.input.as_slice()).collect();
    let fresh = generate(params, cfg, &Tensor::from_rows(&rows)?)?;
    let mut worst = 0.0f64;
    for (a, b) in file.cases.iter().zip(&fresh.cases) {
        for (x, y) in [(&a.mu, &b.mu), (&a.sigma_sq, &b.sigma_sq), (&a.gate, &b.gate), (&a.z_fused, &b.z_fused)] {
            for (p, q) in x.iter().zip(y) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    Ok(worst)
}

pub fn write(path: &Path, file: &FixtureFile) -> Result<()> {
    let json = serde_json::to_string_pretty(file).expect("fixtures serialize");
    fs::write(path, json + "\n").map_err(io_at(path))
}

pub fn read(path: &Path) -> Result<FixtureFile> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| SimError::format(path, e.to_string()))
}
