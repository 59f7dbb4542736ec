//! Per-(method, ratio) result tables and method-ordering reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use pfin_core::federation::Method;
use serde::{Deserialize, Serialize};

use crate::config::Ratio;
use crate::error::{io_at, Result, SimError};
use crate::experiment::Summary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub ratio: Ratio,
    pub mean_auc: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std_auc: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Sorted by ratio, then by the canonical method order.
    pub rows: Vec<ResultRow>,
}

fn method_rank(name: &str) -> usize {
    Method::ALL.iter().position(|m| m.name() == name).unwrap_or(Method::ALL.len())
}

impl ResultTable {
    pub fn from_summaries(summaries: &[Summary]) -> Self {
        let mut groups: BTreeMap<(Ratio, usize, &str), Vec<f64>> = BTreeMap::new();
        for s in summaries {
            groups
                .entry((s.ratio, method_rank(&s.method), s.method.as_str()))
                .or_default()
                .push(s.mean_auc);
        }
        let rows = groups
            .into_iter()
            .map(|((ratio, _, method), aucs)| {
                let n = aucs.len() as f64;
                let mean = aucs.iter().sum::<f64>() / n;
                let std_auc = (aucs.len() >= 2)
                    .then(|| (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
                ResultRow {
                    method: method.to_string(),
                    ratio,
                    mean_auc: mean,
                    std_auc,
                    seeds: aucs.len(),
                }
            })
            .collect();
        ResultTable { rows }
    }

    pub fn get(&self, method: Method, ratio: Ratio) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method.name() && r.ratio == ratio)
    }

    pub fn ratios(&self) -> Vec<Ratio> {
        let mut r: Vec<Ratio> = self.rows.iter().map(|r| r.ratio).collect();
        r.dedup();
        r
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| SimError::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["ratio", "method", "mean_auc", "std_auc", "seeds"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.ratio.to_string(),
                r.method.clone(),
                r.mean_auc.to_string(),
                r.std_auc.map_or_else(String::new, |s| s.to_string()),
                r.seeds.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(io_at(path))
    }

    /// Table 1-style layout: AUC in percent, `mean ± std`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:<12} {:>16} {:>6}", "ratio", "method", "test AUC (%)", "seeds");
        for r in &self.rows {
            let auc = match r.std_auc {
                Some(s) => format!("{:.2} ± {:.2}", 100.0 * r.mean_auc, 100.0 * s),
                None => format!("{:.2}", 100.0 * r.mean_auc),
            };
            let _ = writeln!(out, "{:<8} {:<12} {:>16} {:>6}", r.ratio.to_string(), r.method, auc, r.seeds);
        }
        out
    }
}

/// Difference in mean AUC, in percentage points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub label: String,
    /// `None` when a method involved is missing for this ratio.
    pub points: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub ratio: Ratio,
    /// Methods by descending mean AUC; ties keep method-name order.
    pub ranking: Vec<(String, f64)>,
    /// Adjacent ranking entries with equal mean AUC.
    pub ties: Vec<(String, String)>,
    pub gaps: Vec<Gap>,
    pub missing: Vec<String>,
    /// Whether `pfin_feduq > pfin_fedavg > fin_fedavg > max(zero, uniform)`;
    /// `None` if any of them is missing.
    pub ordering_holds: Option<bool>,
}

pub fn compare(table: &ResultTable) -> Vec<RatioReport> {
    table
        .ratios()
        .into_iter()
        .map(|ratio| {
            let auc = |m: Method| table.get(m, ratio).map(|r| r.mean_auc);
            let mut ranking: Vec<(String, f64)> = table
                .rows
                .iter()
                .filter(|r| r.ratio == ratio)
                .map(|r| (r.method.clone(), r.mean_auc))
                .collect();
            ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let ties = ranking
                .windows(2)
                .filter(|w| w[0].1 == w[1].1)
                .map(|w| (w[0].0.clone(), w[1].0.clone()))
                .collect();

            let baseline = auc(Method::Zero).zip(auc(Method::Uniform)).map(|(z, u)| z.max(u));
            let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| 100.0 * (a - b));
            let gap = |label: &str, points| Gap {
                label: label.into(),
                points,
            };
            let (feduq, fedavg, fin) = (auc(Method::PfinFedUq), auc(Method::PfinFedAvg), auc(Method::FinFedAvg));
            let gaps = vec![
                gap("pfin_feduq - pfin_fedavg", diff(feduq, fedavg)),
                gap("pfin_fedavg - fin_fedavg", diff(fedavg, fin)),
                gap("fin_fedavg - max(zero, uniform)", diff(fin, baseline)),
                gap("pfin_feduq - fin_fedavg", diff(feduq, fin)),
            ];
            let ordering_holds = match (feduq, fedavg, fin, baseline) {
                (Some(a), Some(b), Some(c), Some(d)) => Some(a > b && b > c && c > d),
                _ => None,
            };
            let missing = Method::ALL
                .iter()
                .filter(|m| auc(**m).is_none())
                .map(|m| m.name().to_string())
                .collect();
            RatioReport {
                ratio,
                ranking,
                ties,
                gaps,
                missing,
                ordering_holds,
            }
        })
        .collect()
}

pub fn render_reports(reports: &[RatioReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "ratio {}", r.ratio);
        for (i, (m, a)) in r.ranking.iter().enumerate() {
            let _ = writeln!(out, "  {}. {:<12} {:.2}", i + 1, m, 100.0 * a);
        }
        for (a, b) in &r.ties {
            let _ = writeln!(out, "  tie: {a} = {b}");
        }
        for g in &r.gaps {
            let value = g.points.map_or_else(|| "unavailable".into(), |p| format!("{p:+.2} pts"));
            let _ = writeln!(out, "  {:<32} {}", g.label, value);
        }
        if !r.missing.is_empty() {
            let _ = writeln!(out, "  missing: {}", r.missing.join(", "));
        }
        let verdict = match r.ordering_holds {
            Some(true) => "holds",
            Some(false) => "violated",
            None => "undetermined",
        };
        let _ = writeln!(out, "  ordering pfin_feduq > pfin_fedavg > fin_fedavg > baselines: {verdict}");
    }
    out
}

/// Every `summary.json` below `root`, in path order.
pub fn collect_summaries(root: &Path) -> Result<Vec<Summary>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| SimError::Io {
            path: e.path().unwrap_or(root).to_path_buf(),
            source: e.into(),
        })?;
        if entry.file_type().is_file() && entry.file_name() == "summary.json" {
            out.push(Summary::read(entry.path())?);
        }
    }
    Ok(out)
}
